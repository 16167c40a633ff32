"""Drive the bundled toy pipeline through the command-line entry point."""

from __future__ import annotations

import os
import subprocess
import sys
from pathlib import Path

ATTACKS = ("bim", "cw", "fgsm", "pgd")


def toy_commands(config: Path, out: Path) -> list[list[str]]:
    common = ["--config", str(config), "--out", str(out), "--threads", "1"]
    ckpt = {k: str(out / "checkpoints" / f"{k}.json") for k in ("at", "adml")}
    cmds = [["gen-data"], ["train", "--defense", "at"], ["train", "--defense", "adml"]]
    for k in ("at", "adml"):
        cmds += [["attack", "--checkpoint", ckpt[k], "--attack", a] for a in ATTACKS]
        cmds.append(["estimate-theta", "--checkpoint", ckpt[k]])
    cmds += [["report", "--checkpoints", f"{ckpt['at']},{ckpt['adml']}"], ["ablate", "--checkpoint", ckpt["at"]]]
    return [c[:1] + common + c[1:] for c in cmds]


def run_toy(config: Path, out: Path) -> dict[str, bytes]:
    """Run every verb in a fresh interpreter; return {relative path: bytes} of the outputs."""
    env = {k: v for k, v in os.environ.items() if k != "ADVCAUSAL_OUT"}
    for cmd in toy_commands(config, out):
        subprocess.run([sys.executable, "-m", "advcausal", *cmd], check=True, env=env,
                       stdout=subprocess.DEVNULL)
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
