import hashlib
import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dlora.checkpoint import load_backbone, save_backbone  # noqa: E402
from dlora.model import ModelConfig  # noqa: E402
from dlora.pretrain import pretrain_backbone  # noqa: E402

# Charlm pretraining used wherever a "pretrained backbone" is called for.
PRETRAIN = {"task": "charlm", "steps": 200, "batch_size": 16, "lr": 3e-3, "seed": 0}

_acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def pretrained_backbone(pytestconfig):
    """Desk backbone pretrained on the character corpus, cached across sessions."""
    key = json.dumps({**PRETRAIN, "model": ModelConfig().__dict__}, sort_keys=True)
    cache = pytestconfig.cache.mkdir("dlora")
    path = cache / f"backbone_{hashlib.sha256(key.encode()).hexdigest()[:12]}.dlbk"
    stamp = path.with_suffix(".json")
    if path.exists() and stamp.exists() and stamp.read_text() == key:
        return load_backbone(path)
    bb, _ = pretrain_backbone(ModelConfig(), **PRETRAIN)
    save_backbone(bb, path)
    stamp.write_text(key)
    return bb


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion for the terminal summary."""

    def record(n: int, ok: bool, detail: str) -> None:
        _acceptance_lines.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
