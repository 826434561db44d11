"""Learning-rate schedule driven by an EMA of the validation loss on a flat loss curve."""
from volseg.trainer import TrainConfig, TrainState, update_schedule

cfg = TrainConfig()
state = TrainState(lr=cfg.lr_init)
for epoch in range(1, cfg.max_epochs + 1):
    lr_before = state.lr
    state = update_schedule(state, 1.0, cfg)
    if state.lr != lr_before:
        print(f"epoch {epoch}: lr {lr_before:g} -> {state.lr:g}")
    if state.stop:
        print(f"epoch {epoch}: stop (no EMA improvement for {cfg.stop_patience_epochs} epochs)")
        break
