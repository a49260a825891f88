# The same workflow, driven end to end through the command-line entry
# points.  Every stage reads one JSON config and a workspace directory;
# artifacts carry the config hash so stale mixtures are detectable.

import json
import pathlib
import tempfile

from geotoken import cli

work = pathlib.Path(tempfile.mkdtemp(prefix="geotoken_demo_"))
print("workspace:", work)

config = {
    "version": 1,
    "world": {"n_clusters": 60, "size_min": 5, "size_max": 30,
              "spread_km": 10.0, "seed": 3},
    "align": {"epochs": 6},
    "model": {"d_model": 32, "n_heads": 4, "n_layers_enc": 1,
              "n_layers_dec": 1, "d_ffn": 64, "M": 4, "input_dims": 128},
    "train": {"epochs": 12, "batch_size": 64, "dtype": "float32"},
    "reward": {"pool_size": 10, "n_queries": 80},
    "predict": {"mode": "pool", "selector": "reward", "pool_size": 20,
                "temperature": 0.7},
    "sweep": {"ks": [2, 5, 10, 20], "temperatures": [0.3, 0.7, 1.2],
              "limit": 40},
}
cfg_path = work / "run.json"
cfg_path.write_text(json.dumps(config, indent=2))

out = work / "ws"
for cmd in ("gen", "train-align", "build-gallery", "train-model",
            "predict", "evaluate", "sweep"):
    print(f"\n$ geotoken {cmd} --config run.json --out ws")
    rc = cli.main([cmd, "--config", str(cfg_path), "--out", str(out)])
    assert rc == 0, f"{cmd} failed with {rc}"

print("\nartifacts:")
for p in sorted(out.iterdir()):
    print(f"  {p.name:18s} {p.stat().st_size:>10,} bytes")

# predictions are one JSON object per line after a header row
lines = (out / "predictions.jsonl").read_text().splitlines()
print("\nheader:", lines[0][:78], "...")
print("row:   ", lines[1][:78], "...")

# the tokenizer is exposed directly as well
print("\n$ geotoken tokenize 48.8566,2.3522")
cli.main(["tokenize", "48.8566,2.3522"])
print("$ geotoken tokenize --reverse 203330303130032301330")
cli.main(["tokenize", "--reverse", "203330303130032301330"])
