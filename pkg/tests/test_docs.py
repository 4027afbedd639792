"""Runs the guide's ``bash`` and ``python`` blocks, in order, in one scratch directory."""

import re
import subprocess
import sys
from pathlib import Path

GUIDE = Path(__file__).resolve().parent.parent / "docs" / "guide.md"
BLOCK = re.compile(r"^```(bash|python)\n(.*?)^```", re.S | re.M)


def blocks():
    return BLOCK.findall(GUIDE.read_text())


def test_guide_has_runnable_blocks():
    kinds = [k for k, _ in blocks()]
    assert kinds.count("bash") >= 4 and "python" in kinds


def test_guide_blocks_run_verbatim(tmp_path):
    for i, (kind, code) in enumerate(blocks()):
        cmd = ["bash", "-e", "-c", code] if kind == "bash" else [sys.executable, "-c", code]
        res = subprocess.run(cmd, cwd=tmp_path, capture_output=True, text=True, timeout=600)
        assert res.returncode == 0, f"block {i} ({kind}) failed:\n{code}\n{res.stdout}\n{res.stderr}"
