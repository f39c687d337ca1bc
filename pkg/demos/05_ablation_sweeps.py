"""Run the ablation suites against a saved backbone checkpoint.

The same sweeps are available from the command line:

    blink gen-data --count 300 --out data/
    blink train backbone --data data/ --out runs/backbone/
    blink ablate modules --backbone runs/backbone/backbone.ckpt \
        --data data/ --out runs/ablate/

This script drives the underlying functions directly with a small model so
it runs quickly without prior artifacts.
"""

from pathlib import Path

from blink.checkpoint import save_checkpoint
from blink.harness.commands import cmd_ablate, cmd_gen_data, _save_backbone
from blink.harness.config import load_config
from blink.model import ModelConfig, init_weights

out = Path("demo_out/ablate")
data_dir = Path("demo_out/ablate_data")

cfg = load_config(None, {"data.difficulty": "easy", "run.seed": "7"})
cmd_gen_data(cfg, count=40, out_dir=data_dir)

# untrained weights keep the demo fast; accuracies hover near chance but the
# sweep structure (cells, actions, CSV schema) is the point here
backbone_path = out / "backbone.ckpt"
out.mkdir(parents=True, exist_ok=True)
_save_backbone(backbone_path, init_weights(cfg.model_config()), cfg)

for suite in ("modules", "thresholds", "interp"):
    rows = cmd_ablate(cfg, suite, backbone_path, data_dir, out)
    print(f"suite {suite}:")
    for row in rows:
        print(
            f"  {row['cell']:<18} acc={row['accuracy']:.3f} "
            f"expand={row['mean_expand']:.2f} drop={row['mean_drop']:.2f}"
        )
print(f"\nCSV tables written under {out}/")
