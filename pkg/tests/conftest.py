import numpy as np
import pytest
import torch

from ced.corpus import Conversation, FeatureSequence, SynthConfig, Turn, synth_corpus
from ced.model import ModelConfig

TINY = ModelConfig(input_dim=8, conformer_units=16, transformer_units=8, heads=2, conformer_ff_units=24,
                   cross_ff_units=12, head_units=8, conv_kernel=3, dropout=0.0, max_frames=32)

TOY = ModelConfig(input_dim=32, conformer_units=32, transformer_units=16, heads=4, conformer_ff_units=64,
                  cross_ff_units=32, head_units=16, conv_kernel=7, dropout=0.1, max_frames=64)


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    torch.set_num_threads(1)


def make_session(speakers, dim=4, seed=0, frames=3, sid="s0"):
    """Session with the given speaker sequence and random, distinct frames."""
    rng = np.random.default_rng(seed)
    turns, feats, t = [], [], 0.0
    for i, spk in enumerate(speakers):
        n = frames if isinstance(frames, int) else frames[i]
        turns.append(Turn(sid, spk, t, t + n * 0.02))
        feats.append(FeatureSequence(sid, i, spk, rng.standard_normal((n, dim)).astype(np.float32)))
        t += n * 0.02 + 1.0
    labels = list(dict.fromkeys(speakers)) + ["A", "B"]
    a = labels[0]
    b = next(x for x in labels if x != a)
    return Conversation(sid, turns, a, b, {}, feats)


@pytest.fixture
def small_corpus():
    return synth_corpus(SynthConfig(n_sessions=6, turns_per_session=6, dim=8, alpha=0.8, seed=3, frames_min=4, frames_max=9))


def analytic_param_count(c: ModelConfig) -> int:
    """Hand count, layer by layer."""
    din, d, t, ff, cff, hu, k = (c.input_dim, c.conformer_units, c.transformer_units, c.conformer_ff_units,
                                 c.cross_ff_units, c.head_units, c.conv_kernel)
    ln = lambda n: 2 * n  # noqa: E731
    lin = lambda i, o: i * o + o  # noqa: E731
    macaron = ln(d) + lin(d, ff) + lin(ff, d)
    mhsa = ln(d) + 4 * lin(d, d) + d * d + 2 * d
    conv = ln(d) + lin(d, 2 * d) + (k * d + d) + ln(d) + lin(d, d)
    conformer = 2 * macaron + mhsa + conv + ln(d)
    cross = 4 * lin(t, t) + ln(t) + lin(t, cff) + lin(cff, t) + ln(t)
    n_cross = c.cross_layers * (1 if c.share_cross else 2)
    head_in = (2 if c.head_features == "concat" else 4) * t
    return (lin(din, d) + c.conformer_layers * conformer + lin(d, t) + n_cross * cross
            + lin(head_in, hu) + lin(hu, 1))


# -- acceptance criteria reporting ------------------------------------------------------

_CRITERIA: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): test backs the named acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA.setdefault(marker.args[0], []).append((rep.passed, item.name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: int(c[1:])):
        rows = _CRITERIA[cid]
        ok = all(passed for passed, _, _ in rows)
        detail = " | ".join(d for _, _, d in rows if d)
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'}  {detail}")
