"""Walk through one expand / drop cycle on the token sequence.

Expand extracts the most salient patch's tokens, bilinearly upsamples them
to the full grid, optionally refines them with the trained amplifier, and
inserts them as a SuperRes segment between the visual and text segments.
Drop removes that segment and restores the original layout exactly.
"""

import numpy as np

from blink.data import generate_scene
from blink.model import ModelConfig, ToyMLLM
from blink.resolution import drop, expand
from blink.saliency import PatchGrid, scan_layer
from blink.tokensr import TokenSRWeights

model = ToyMLLM(ModelConfig())
scene = generate_scene(3, "easy")
seq = model.build_sequence(scene.image, scene.query_ids)
grid = PatchGrid(model.config.grid_side, 2)


def describe(s, label):
    parts = ", ".join(f"{seg.role.value}[{seg.length}]" for seg in s.segments)
    print(f"{label}: len={s.length}  [{parts}]")


describe(seq, "base      ")

report = scan_layer(model, 3, seq, grid)
print(f"layer 3 scan: rho={report.rho:.4f}, argmax patch={report.argmax_patch}")

grown = expand(seq, report.argmax_patch, grid, TokenSRWeights.identity_map(), True)
describe(grown, "expanded  ")

restored = drop(grown)
describe(restored, "dropped   ")

assert restored.length == seq.length
assert all(np.array_equal(a.hidden, b.hidden) for a, b in zip(restored.segments, seq.segments))
print("drop restored the pre-expand sequence bit for bit")
