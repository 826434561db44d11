"""Label/region conversion and the enhancing-tumor voxel-count rule tuned on a cohort."""
import numpy as np

from volseg.regions import (apply_et_rule, labels_to_regions, mean_et_dice, optimize_threshold,
                            regions_to_labels)

rng = np.random.default_rng(0)
labels = rng.choice(np.array([0, 1, 2, 4], np.uint8), size=(6, 6, 6))
regions = labels_to_regions(labels)
print(f"WT {regions.wt.sum()} voxels, TC {regions.tc.sum()}, ET {regions.et.sum()}; "
      f"round trip exact: {np.array_equal(regions_to_labels(regions.stack()), labels)}")

# two cases without enhancing tumor whose predictions carry a few spurious ET voxels
preds, refs = [], []
for k in (3, 5):
    ref = np.full((8, 8, 8), 2, np.uint8)
    pred = ref.copy()
    pred.reshape(-1)[:k] = 4
    preds.append(pred)
    refs.append(ref)
# and one case with a genuine enhancing block
ref = np.full((8, 8, 8), 1, np.uint8)
ref[:3, :3, :3] = 4
preds.append(ref.copy())
refs.append(ref)

rule = optimize_threshold(preds, refs)
print(f"mean ET Dice without rule {mean_et_dice(preds, refs, 0):.3f}, "
      f"with et_min_voxels={rule.et_min_voxels}: {mean_et_dice(preds, refs, rule.et_min_voxels):.3f}")
print("ET voxels left per case:", [int((apply_et_rule(p, rule) == 4).sum()) for p in preds])
