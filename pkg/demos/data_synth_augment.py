"""Synthetic cohort, per-case normalization, patch sampling and augmentation."""
import numpy as np

from volseg.data import AugmentConfig, BatchGenerator, normalize_case, synth_cohort

cases = [normalize_case(c) for c in synth_cohort(6, size=24, rng_seed=3)]
for c in cases:
    labels, counts = np.unique(c.label.data, return_counts=True)
    brain = c.image()[0][c.image()[0] != 0]
    print(f"{c.id}: labels {dict(zip(labels.tolist(), counts.tolist()))}, "
          f"t1 brain mean {brain.mean():+.1e} std {brain.std():.3f}")

gen = BatchGenerator(cases, patch_size=16, batch_size=2, augment_cfg=AugmentConfig(), seed=0)
images, labels = gen.next_batch()
print(f"augmented batch: images {images.shape} {images.dtype}, labels {labels.shape}, "
      f"values {sorted(np.unique(labels).tolist())}")
