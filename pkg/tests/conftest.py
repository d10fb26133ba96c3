"""Shared fixtures.

The toy pipeline (synth-data, stages A-D, generate 16, eval) is trained once
per session through the command line and reused by every test that needs
trained models. Set CANONSEQ_TOY_DIR to reuse a finished run directory.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from canonseq import pipeline as pl
from canonseq.cli import main
from canonseq.config import load_config
from canonseq.pcio import synth_dataset

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.yaml"
STEPS = [
    ["synth-data"],
    ["train-cae"],
    ["train-group"],
    ["train-vqvae"],
    ["train-transformer"],
    ["generate", "--n", "16"],
    ["eval"],
]


def _run_toy(out):
    timings = {}
    start = time.perf_counter()
    for step in STEPS:
        t = time.perf_counter()
        code = main(["--config", str(TOY_CONFIG), "--out", str(out), *step])
        assert code == 0, f"{step[0]} exited with {code}"
        timings[step[0]] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - start
    (out / "timings.json").write_text(json.dumps(timings, indent=1))
    return timings


@pytest.fixture(scope="session")
def toy_config():
    return load_config(TOY_CONFIG)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Output directory of a finished toy run plus its per-step wall-clock times."""
    reuse = os.environ.get("CANONSEQ_TOY_DIR")
    if reuse and (Path(reuse) / "timings.json").exists():
        out = Path(reuse)
        timings = json.loads((out / "timings.json").read_text())
    else:
        out = Path(reuse) if reuse else tmp_path_factory.mktemp("toy")
        out.mkdir(parents=True, exist_ok=True)
        timings = _run_toy(out)
    return out, timings


@pytest.fixture(scope="session")
def toy_models(toy_run):
    return pl.load_models(toy_run[0])


@pytest.fixture(scope="session")
def toy_train(toy_run):
    return pl.load_split(toy_run[0], "train")


@pytest.fixture(scope="session")
def toy_history(toy_run):
    out = toy_run[0]
    hist = {}
    for stage in pl.STAGE_NAMES:
        path = pl.checkpoint_path(out, stage)
        hist[stage] = json.loads(path.with_name(path.stem + "_history.json").read_text())["history"]
    return hist


@pytest.fixture(scope="session")
def toy_tokens64(toy_models):
    """64 fresh toy shapes and their token sequences under the trained toy codec."""
    shapes = synth_dataset("ellipsoid", 64, 512, seed=100).samples
    tokens = np.stack([pl.encode_to_tokens(toy_models, x) for x in shapes])
    return shapes, tokens


# acceptance criteria record their outcome here; printed after the run
CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} [PRIMARY]: {'PASS' if ok else 'FAIL'}  {detail}")
