"""Mirror test-time augmentation and ensembling of two differently seeded models."""
import numpy as np

from volseg.data import normalize_case, synth_cohort
from volseg.inference import ensemble, predict_tta, predict_volume
from volseg.nn import ModelConfig, build_unet

case = normalize_case(synth_cohort(1, size=16, rng_seed=4)[0])
nets = [build_unet(ModelConfig(base_features=4, depth=3, init_seed=s)) for s in (0, 1)]

single = predict_volume(nets[0], case)
tta = predict_tta(nets[0], case, checkpoint_id="seed0")
flipped = np.ascontiguousarray(case.image()[:, ::-1])
gap = np.abs(predict_tta(nets[0], flipped).probabilities[:, ::-1] - tta.probabilities).max()
print(f"TTA vs single pass: max change {np.abs(tta.probabilities - single.probabilities).max():.3e}")
print(f"TTA flip equivariance error: {gap:.1e}")

combo = ensemble([tta, predict_tta(nets[1], case, checkpoint_id="seed1")])
print(f"ensemble provenance {combo.provenance}, sums to one: "
      f"{np.allclose(combo.probabilities.sum(axis=0), 1.0, atol=1e-5)}")
