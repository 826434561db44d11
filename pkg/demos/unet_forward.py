"""Build the U-Net, report its channel ladder and parameter count, run one forward pass."""
import numpy as np

from volseg.nn import ModelConfig, build_unet

for cfg in (ModelConfig(), ModelConfig(base_features=4, depth=3)):
    net = build_unet(cfg)
    print(f"base {cfg.base_features}, depth {cfg.depth}: features {cfg.features}, "
          f"{net.num_parameters():,} parameters, input sides must divide by {cfg.divisor}")

net = build_unet(ModelConfig(base_features=4, depth=3, head_mode="sigmoid"))
x = np.random.default_rng(0).normal(size=(1, 4, 16, 16, 16)).astype(np.float32)
logits = net(x)
probs = net.probabilities(logits).data
print(f"sigmoid head: logits {logits.shape}, probabilities in [{probs.min():.3f}, {probs.max():.3f}]")
