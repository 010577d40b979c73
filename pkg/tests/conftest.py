import numpy as np
import pytest
import torch

from orgtrl.caption_decoder import CaptionModel, DecoderConfig
from orgtrl.feature_store import SynthConfig, generate_synthetic, load_dataset
from orgtrl.org_encoder import OrgConfig

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_acceptance():
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def small_model(vocab_size=9, seed=0, mode="c_org", top_k=3, d=8, hidden=8, dtype=torch.float64,
                d_in=5) -> CaptionModel:
    return CaptionModel.create(vocab_size, d_in, d_in, d_in, OrgConfig(mode, top_k, d),
                               DecoderConfig(hidden, 6, 7, beam=3, max_len=6), seed=seed, dtype=dtype)


def random_video(rng, L=3, N=2, d=5, batch=1):
    return (rng.standard_normal((batch, L, d)), rng.standard_normal((batch, L, d)),
            rng.standard_normal((batch, L, N, d)))


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(videos=6, frames=4, objects=3, d_a=8, d_m=8, d_o=8)
    generate_synthetic(cfg, 13, out)
    return out


@pytest.fixture(scope="session")
def synth_records(synth_dir):
    return load_dataset(synth_dir / "manifest.json")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TableModel:
    """Step model backed by a function prefix -> next-word distribution.
    The decoder state is the tensor of every input word so far (BOS first)."""

    def __init__(self, dist_fn, vocab_size: int):
        self.dist_fn = dist_fn
        self.vocab_size = vocab_size

    def initial_state(self, ctx, n):
        return torch.zeros((n, 0), dtype=torch.long)

    def step(self, ctx, prev_words, state):
        prev_words = torch.as_tensor(prev_words, dtype=torch.long)
        if state.shape[0] != prev_words.shape[0]:
            state = state.expand(prev_words.shape[0], -1)
        state = torch.cat([state, prev_words[:, None]], dim=1)
        with np.errstate(divide="ignore"):
            logp = np.log(np.stack([self.dist_fn(tuple(row[1:].tolist())) for row in state]))
        return torch.as_tensor(logp), state

TINY_SETTINGS = [
    "synth.videos=6", "synth.frames=4", "synth.objects=3", "synth.d_a=8", "synth.d_m=8", "synth.d_o=8",
    "vocab.min_count=1", "org.dim=16", "decoder.hidden=16", "decoder.word_dim=8", "decoder.att_dim=16",
    "decoder.max_len=8", "decoder.beam=3", "trl.k=5", "train.epochs=2", "train.batch=4",
]

PREP_STAGES = ("gen-synth", "build-vocab", "train-elm", "precompute-soft")


def write_config(path, settings=TINY_SETTINGS):
    path.write_text("\n".join(settings) + "\n")
    return path


def run_stages(out, cfg_path, stages, extra=(), seed=13):
    from orgtrl.cli import run

    for stage in stages:
        argv = [stage, "--config", str(cfg_path), "--seed", str(seed), "--out", str(out)]
        for item in extra:
            argv += ["--set", item]
        code = run(argv)
        assert code == 0, f"{stage} exited with {code}"
