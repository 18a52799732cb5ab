import numpy as np
import pytest

from mae_ast import features
from mae_ast.synthetic import tone_corpus
from mae_ast.tokenizer import TokenizationMode, tokenize
from mae_ast.trainer import Clip


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tone_specs():
    waves, labels = tone_corpus([300.0, 1000.0, 3000.0], per_class=2, seconds=0.5, seed=7)
    return [features.log_mel(w) for w in waves], labels


@pytest.fixture(scope="session")
def tone_clips(tone_specs):
    specs, labels = tone_specs
    mean, std = features.fit_normalizer(specs)
    clips = [
        Clip(f"clip{i}", tokenize(features.normalize(s, mean, std), TokenizationMode.patch(), f"clip{i}"))
        for i, s in enumerate(specs)
    ]
    return clips, labels, (mean, std)


def write_fbank_corpus(directory, specs):
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(specs):
        p = directory / f"clip{i:03d}.fbank"
        features.write_fbank(p, s)
        paths.append(p)
    return paths


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, ok, detail):
    ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    print(ACCEPTANCE_LINES[-1])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
