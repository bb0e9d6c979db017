"""The full command-line pipeline: gen -> train -> eval -> track.

Everything the library does is reachable from the `querytrack` command.
This demo drives it exactly like a shell session would, writing into a
temporary directory, with a small config so it finishes quickly. Outputs
are deterministic: rerunning any step with the same seed reproduces the
same bytes.
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

root = Path(tempfile.mkdtemp(prefix="querytrack_demo_"))
config = root / "config.json"
config.write_text(json.dumps({
    "brain_dim": 32, "brain_blocks": 1, "brain_heads": 2,
    "decoder_dim": 16, "encoder_blocks": 1, "encoder_heads": 2,
    "image_token_count": 16, "max_seq_len": 160, "batch_size": 2,
}))


def run(*args):
    cmd = [sys.executable, "-m", "querytrack.cli", *args]
    print(f"$ querytrack {' '.join(args)}")
    proc = subprocess.run(cmd, capture_output=True, text=True)
    for line in proc.stderr.strip().splitlines():
        print(f"  {line}")
    print(f"  exit {proc.returncode}")
    return proc


data = root / "bench"
run("gen", "--out", str(data), "--train", "2", "--eval", "1", "--seed", "11")

ckpt = root / "model.ckpt"
run("train", "--stage", "1", "--data", str(data), "--config", str(config),
    "--ckpt-out", str(ckpt), "--steps", "5",
    "--loss-csv", str(root / "loss.csv"))

report = root / "report.json"
run("eval", "--data", str(data), "--ckpt", str(ckpt),
    "--report", str(report))
print("\nreport:")
print(json.dumps(json.loads(report.read_text()), indent=2)[:600], "...")

masks = root / "masks"
seq_dir = next(p for p in sorted((data / "eval").iterdir()) if p.is_dir())
run("track", "--ckpt", str(ckpt), "--frames", str(seq_dir / "frames"),
    "--instruction", "the red square", "--out", str(masks))
outputs = sorted(p.name for p in masks.iterdir())
print(f"\nwrote {len(outputs)} files: {outputs[:4]} ...")
