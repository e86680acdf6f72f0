import numpy as np
import pytest

from xmc.data import SynthConfig, Vocab, code_name, generate_synthetic, tokenize_and_align
from xmc.model import ModelConfig, init_params


class Tiny:
    """A small synthetic corpus with a matching untrained model."""

    def __init__(self, n_train=40, seed=0, **synth):
        cfg = SynthConfig(n_train=n_train, n_val=8, n_test=8, num_codes=4, length=(3, 12), seed=seed, **synth)
        self.records = generate_synthetic(cfg)
        self.vocab = Vocab.build([r.text for r in self.records["train"]])
        self.docs = {k: [tokenize_and_align(r, self.vocab, 32) for r in v] for k, v in self.records.items()}
        self.labels = tuple(code_name(j) for j in range(4))
        self.model_config = ModelConfig(vocab_size=len(self.vocab), num_classes=4, embed_dim=8, layers=1,
                                        heads=2, max_len=32, dropout=0.0, labels=self.labels)

    def params(self, seed=0):
        return init_params(self.model_config, seed)


@pytest.fixture(scope="session")
def tiny():
    return Tiny()


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(b))))


# acceptance outcomes, one entry per (criterion, part); printed at the end of the run
ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((criterion, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted({c for c, _, _ in ACCEPTANCE}):
        parts = [(ok, d) for c, ok, d in ACCEPTANCE if c == n]
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        tr.write_line(f"criterion {n:>2}: {status}  " + " | ".join(d for _, d in parts))
