"""Train a small joint detector on toy foggy scenes, evaluate it, then drop the restoration branch."""
import sys
from pathlib import Path

from fogdet.config import TrainConfig
from fogdet.datakit import toy_fog_dataset
from fogdet.model import load_checkpoint, strip_restoration
from fogdet.training import evaluate, fit

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/train")
train = toy_fog_dataset(160, seed=1, beta_range=(0.07, 0.12), prefix="train")
test = toy_fog_dataset(16, seed=2, beta_range=(0.05, 0.14), prefix="test")

cfg = TrainConfig(epochs=12, batch_size=16)
result = fit(cfg, train, out)
first, last = result.history[0], result.history[-1]
print("grand total %.3f -> %.3f" % (first["grand_total"], last["grand_total"]))
print("restoration %.4f -> %.4f" % (first["restoration_loss"], last["restoration_loss"]))

ev = evaluate(result.model, test, cfg)
print("mAP@0.5 %.4f" % ev.map_score, {k: round(v, 3) for k, v in ev.per_class_ap.items()})

# the restoration decoder only shapes training; inference works without it
removed = strip_restoration(result.checkpoint, out / "detector.pt")
detector = load_checkpoint(out / "detector.pt")
print("removed %d restoration tensors" % removed)
print("stripped mAP@0.5 %.4f" % evaluate(detector, test, cfg).map_score)
