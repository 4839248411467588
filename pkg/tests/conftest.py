import contextlib
import time

import numpy as np
import pytest

from wsifuse.synth import SynthSpec, make_synthetic_slide


def small_spec(seed: int = 7, **kw) -> SynthSpec:
    """256 px slide, tile 8, six levels: every quad maps to exactly one tile."""
    return SynthSpec(size=256, levels=6, tile=8, seed=seed, **kw)


@pytest.fixture(scope="session")
def small_synth():
    return make_synthetic_slide(small_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def oracle_experts(labels, levels: int = 6):
    from wsifuse.classes import BINARY_TOKENS, TUMOR_TOKENS
    from wsifuse.experts import OracleExpert
    from wsifuse.fusion import FixedWeights
    from wsifuse.pipeline import BINARY_MAP, ExpertSet

    return ExpertSet(
        multiclass=OracleExpert(TUMOR_TOKENS, labels),
        binary=OracleExpert(BINARY_TOKENS, labels, BINARY_MAP),
        weigher=FixedWeights.one_hot(levels, levels - 1),
    )


def cli_pipeline(root, seed: int = 5) -> dict:
    """Run synth -> train experts -> train-weigher -> analyze -> evaluate via the CLI.

    Returns {relative path: bytes} for every file written.
    """
    from pathlib import Path

    from wsifuse.cli import main

    root = Path(root)
    out = str(root)
    slide, ann = str(root / "slide"), str(root / "annotation.txt")
    common = ["--out", out, "--seed", str(seed)]
    train = ["--slide", slide, "--annotation", ann]
    assert main(["synth", "--size", "256", "--levels", "6", "--tile", "8", *common]) == 0
    quick = ["--epochs", "4", "--steps", "10"]
    assert main(["train-expert", "--kind", "binary", *train, *quick, *common]) == 0
    assert main(["train-expert", "--kind", "multiclass", *train, *quick, *common]) == 0
    config = root / "pipeline.cfg"
    config.write_text(
        f"binary_expert {root / 'binary_expert.txt'}\n"
        f"multiclass_expert {root / 'multiclass_expert.txt'}\n"
        f"weigher {root / 'weigher.txt'}\n"
    )
    cfg = ["--config", str(config)]
    assert main(["train-weigher", *train, "--epochs", "3", "--batch-size", "32",
                 "--widths", "4", "--input-size", "8", *cfg, *common]) == 0
    logs = []
    for strategy in ("multiclass_only", "multiclass_pipeline", "weighing_pipeline"):
        assert main(["analyze", slide, "--strategy", strategy, *cfg, *common]) == 0
        logs.append(str(root / f"{strategy}.log"))
    assert main(["evaluate", ann, *logs, *common]) == 0
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "pipeline.cfg"
    }


# --------------------------------------------------------------------------
# acceptance reporting

ACCEPTANCE_LINES: list[str] = []


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Time a criterion and record a PASS/FAIL line; yields a list for measured values."""
    notes: list[str] = []
    start = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        detail = "; ".join(notes + [f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"])
        _record("FAIL", number, title, time.perf_counter() - start, detail)
        raise
    _record("PASS", number, title, time.perf_counter() - start, "; ".join(notes))


def _record(status, number, title, seconds, detail):
    line = f"{status} criterion {number:>2}: {title} [{seconds:.1f} s] {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
