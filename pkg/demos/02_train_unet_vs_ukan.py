"""Train a small U-Net and U-KAN on synthetic tiles and compare IoU and FLOPs.

Run: python3 demos/02_train_unet_vs_ukan.py   (about a minute on one core)
"""

from kanseg.data import channel_statistics, normalize, synth_generate
from kanseg.models import ModelConfig, build_model, count_flops, flop_report
from kanseg.training import TrainConfig, evaluate, train

tiles = synth_generate(120, size=32, channels=4, seed=0)
stats = channel_statistics(tiles[:90])
tiles = [normalize(t, stats) for t in tiles]
train_set, val_set, test_set = tiles[:90], tiles[90:105], tiles[105:]

for kind in ("conv", "tok_kan"):
    cfg = ModelConfig(in_channels=4, stage_channels=(8, 16), bottleneck=kind)
    model = build_model(cfg, seed=0)
    result = train(model, train_set, val_set, TrainConfig(epochs=10, batch_size=8, learning_rate=1e-3))
    report = evaluate(result.best_model, test_set)
    bneck = sum(v for k, v in flop_report(model, (4, 32, 32)).items() if k.startswith("bneck"))
    print(f"{kind:8s} params={model.num_parameters():6d}  flops={count_flops(model):9d}  "
          f"bottleneck flops={bneck:8d}  best epoch={result.best_epoch}  test IoU={report.iou:.3f}")

# the bottleneck is where the KAN block saves work; make it dominate to see the gap widen
heavy = ModelConfig(in_channels=4, stage_channels=(4, 8, 64), tok_kan_depth=16)
u, k = count_flops(build_model(heavy)), count_flops(build_model(heavy.with_bottleneck("tok_kan")))
print(f"bottleneck-heavy config: U-KAN / U-Net FLOPs = {k / u:.2f}")
