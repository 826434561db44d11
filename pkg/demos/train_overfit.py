"""Overfit a tiny U-Net on one synthetic case and watch whole-tumor Dice climb."""
from volseg.data import AugmentConfig, normalize_case, synth_cohort
from volseg.inference import predict_volume
from volseg.losses import LossConfig
from volseg.metrics import dice
from volseg.nn import ModelConfig, build_unet
from volseg.trainer import TrainConfig, train

case = normalize_case(synth_cohort(1, size=16, rng_seed=0, et_free_fraction=0.0)[0])
model = build_unet(ModelConfig(base_features=4, depth=3))
cfg = TrainConfig(lr_init=3e-3, batches_per_epoch=10, max_epochs=40, patch_size=16,
                  augment=AugmentConfig.disabled(), loss=LossConfig(kind="dice_plus_ce"))


def report(epoch, net, record):
    if epoch % 5 == 0:
        wt = dice(predict_volume(net, case).labels() > 0, case.label.data > 0)
        print(f"epoch {epoch:3d}  train {record.train_loss:+.4f}  lr {record.lr:g}  whole-tumor Dice {wt:.3f}")
    return False


result = train(model, [case], [case], cfg, on_epoch_end=report)
print(f"{result.steps} optimizer steps, best epoch {result.best_epoch}")
