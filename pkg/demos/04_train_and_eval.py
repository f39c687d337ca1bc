"""End-to-end miniature experiment: train a small backbone, distill the
token amplifier, then compare vanilla decoding against the dynamic pipeline.

This uses a reduced 24px model and a small dataset so it finishes in a few
minutes on one core. The `blink` CLI runs the same steps at full scale.
"""

import numpy as np

from blink.backprop import train_backbone
from blink.data import generate_scene, make_crops
from blink.model import ModelConfig, ToyMLLM
from blink.resolution import BlinkConfig, run_blink, run_vanilla
from blink.tokensr import TrainRecipe, train_tokensr

config = ModelConfig(image_size=24)
train = [generate_scene(i, "medium", image_size=24) for i in range(256)]
val = [generate_scene(10_000 + i, "medium", image_size=24) for i in range(100)]

print("training backbone (early-stops at 85% held-out accuracy)...")
weights, report = train_backbone(
    config, train, val, epochs=40, batch_size=32, lr=2e-3, seed=0, verbose=True,
    target_accuracy=0.85,
)
model = ToyMLLM(config, weights)

print("\ndistilling the token amplifier from quadrant crops...")
pairs = []
for s in train[:50]:
    pairs.extend(make_crops(s.image, config.grid_side))
modules, sr_report = train_tokensr(model, pairs, [3, 4], TrainRecipe(seed=0))
for layer in sorted(sr_report.initial_loss):
    print(
        f"  layer {layer}: loss {sr_report.initial_loss[layer]:.4f}"
        f" -> {sr_report.final_loss[layer]:.4f}"
    )

test = [generate_scene(20_000 + i, "medium", image_size=24) for i in range(200)]
answers = np.array([s.answer_id for s in test])
cfg = BlinkConfig()

acc_vanilla = np.mean([run_vanilla(model, s).answer_id == a for s, a in zip(test, answers)])
acc_blink = np.mean(
    [run_blink(model, s, cfg, modules).answer_id == a for s, a in zip(test, answers)]
)
print(f"\nvanilla accuracy: {acc_vanilla:.3f}")
print(f"dynamic-resolution accuracy: {acc_blink:.3f}")
