"""Soft Dice, cross-entropy and their sum on a random prediction and on a perfect one."""
import numpy as np

from volseg.losses import LossConfig, compute_loss
from volseg.regions import labels_to_classes
from volseg.tensor import Tensor

rng = np.random.default_rng(0)
labels = rng.choice(np.array([0, 1, 2, 4], np.uint8), size=(1, 8, 8, 8))
classes = labels_to_classes(labels)
random_logits = Tensor(rng.normal(size=(1, 4, 8, 8, 8)))
# large logits on the right class give a near one-hot softmax
perfect_logits = Tensor(30.0 * (np.eye(4)[classes].transpose(0, 4, 1, 2, 3) - 0.5))

for kind in ("dice", "ce", "dice_plus_ce"):
    cfg = LossConfig(kind=kind)
    a = compute_loss(random_logits, classes, cfg).item()
    b = compute_loss(perfect_logits, classes, cfg).item()
    print(f"{kind:>13}: random {a:+.4f}   perfect {b:+.4f}")
