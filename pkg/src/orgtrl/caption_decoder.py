"""Hierarchical attention decoder: attention LSTM, temporal attention over
frames, cross-frame object alignment, spatial attention over the aligned
objects, language LSTM and vocabulary projection. Also greedy and beam
search inference."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np
import torch

from .errors import ConfigError, ShapeError, ValidationError
from .feature_store import BOS, EOS, PAD, UNK
from .nn_substrate import (
    LstmState,
    ParameterStore,
    embedding_lookup,
    glorot_uniform,
    init_lstm,
    linear_forward,
    log_softmax_stable,
    lstm_cell_step,
    softmax_stable,
    zero_state,
)
from .org_encoder import OrgConfig, encode_objects, init_org

# Never proposed during inference.
BANNED_TOKENS = (PAD, BOS, UNK)


@dataclass(frozen=True)
class DecoderConfig:
    hidden: int = 512
    word_dim: int = 300
    att_dim: int = 512
    beam: int = 5
    max_len: int = 24

    def __post_init__(self):
        if min(self.hidden, self.word_dim, self.att_dim) <= 0:
            raise ConfigError("decoder widths must be positive")
        if self.beam < 1:
            raise ConfigError("beam must be >= 1")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")


class DecoderState(NamedTuple):
    attn: LstmState
    lang: LstmState
    alpha: torch.Tensor | None = None  # [B, L]
    beta: torch.Tensor | None = None  # [B, N]


@dataclass
class VideoContext:
    v: torch.Tensor  # [B, L, d_h] projected frame features
    v_bar: torch.Tensor  # [B, d_h]
    aligned: torch.Tensor  # [B, L, N, d] enhanced objects in anchor order
    frame_mask: torch.Tensor | None = None  # [B, L] bool

    @property
    def batch_size(self) -> int:
        return self.v.shape[0]

    def expand_to(self, n: int) -> "VideoContext":
        if self.batch_size == n:
            return self
        if self.batch_size != 1:
            raise ShapeError(f"cannot broadcast a batch of {self.batch_size} contexts to {n}")
        fm = None if self.frame_mask is None else self.frame_mask.expand(n, -1)
        return VideoContext(self.v.expand(n, -1, -1), self.v_bar.expand(n, -1),
                            self.aligned.expand(n, -1, -1, -1), fm)


# ---------------------------------------------------------------------------
# Components
# ---------------------------------------------------------------------------


def global_features(appearance, motion, W_v, b_v) -> tuple[torch.Tensor, torch.Tensor]:
    """Project concat(appearance, motion) rows to the hidden width; return
    the projected rows and their mean over frames."""
    appearance, motion = torch.as_tensor(appearance), torch.as_tensor(motion)
    if appearance.shape[:-1] != motion.shape[:-1]:
        raise ShapeError(f"appearance {tuple(appearance.shape)} and motion {tuple(motion.shape)} disagree on frames")
    v = linear_forward(torch.cat([appearance, motion], dim=-1).to(W_v.dtype), W_v, b_v)
    return v, v.mean(dim=-2)


def attention_lstm_step(v_bar, prev_word_ids, prev_lang_hidden, state: LstmState,
                        W_e, W, b) -> LstmState:
    w = embedding_lookup(W_e, prev_word_ids)
    return lstm_cell_step(torch.cat([v_bar, w, prev_lang_hidden], dim=-1), state, W, b)


def temporal_attention(v, h_attn, w_a, W_a, U_a, frame_mask=None):
    """alpha_i = softmax_i(w_a . tanh(W_a v_i + U_a h)); c_g = sum_i alpha_i v_i."""
    scores = torch.tanh(v @ W_a + (h_attn @ U_a).unsqueeze(-2)) @ w_a
    alpha = softmax_stable(scores, frame_mask, dim=-1)
    return alpha, (alpha.unsqueeze(-1) * v).sum(dim=-2)


def spatial_attention(u, h_attn, w_b, W_b, U_b):
    """beta_j = softmax_j(w_b . tanh(W_b u_j + U_b h)); c_l = sum_j beta_j u_j."""
    if u.shape[-2] == 0:
        raise ValidationError("spatial attention over zero objects")
    scores = torch.tanh(u @ W_b + (h_attn @ U_b).unsqueeze(-2)) @ w_b
    beta = softmax_stable(scores, dim=-1)
    return beta, (beta.unsqueeze(-1) * u).sum(dim=-2)


def language_lstm_step(c_g, c_l, h_attn, state: LstmState, W, b) -> LstmState:
    return lstm_cell_step(torch.cat([c_g, c_l, h_attn], dim=-1), state, W, b)


def vocab_logits(h_lang, W_z, b_z) -> torch.Tensor:
    return linear_forward(h_lang, W_z, b_z)


def vocab_distribution(h_lang, W_z, b_z) -> torch.Tensor:
    return softmax_stable(vocab_logits(h_lang, W_z, b_z))


def align_objects(raw_objects) -> np.ndarray:
    """Match every frame's objects to the first-frame anchors.

    Returns an int array [L, N]: entry [i, j] is the index of the object in
    frame i assigned to anchor j. Assignment is greedy one-to-one on cosine
    similarity of the raw features: the largest remaining similarity is taken
    first, ties by lower (anchor, object). Zero-norm vectors get similarity 0
    to everything.
    """
    R = np.asarray(raw_objects, dtype=np.float64)
    if R.ndim != 3:
        raise ShapeError(f"expected [L, N, d] objects, got shape {R.shape}")
    L, N, _ = R.shape
    norms = np.linalg.norm(R, axis=-1, keepdims=True)
    unit = np.divide(R, norms, out=np.zeros_like(R), where=norms > 0)
    align = np.empty((L, N), dtype=np.int64)
    align[0] = np.arange(N)
    for i in range(1, L):
        sim = unit[0] @ unit[i].T  # [anchor, object]
        # Row-major stable order over -sim gives the (j, j') tie rule.
        order = np.argsort(-sim, axis=None, kind="stable")
        used_a = np.zeros(N, bool)
        used_o = np.zeros(N, bool)
        placed = 0
        for flat in order:
            j, jp = divmod(int(flat), N)
            if used_a[j] or used_o[jp]:
                continue
            align[i, j] = jp
            used_a[j] = used_o[jp] = True
            placed += 1
            if placed == N:
                break
    return align


def gather_aligned(enhanced: torch.Tensor, align) -> torch.Tensor:
    """Reorder enhanced [..., L, N, d] so slot j of every frame holds anchor j's match."""
    align = torch.as_tensor(np.asarray(align), dtype=torch.long)
    if align.shape != enhanced.shape[:-1]:
        raise ShapeError(f"alignment {tuple(align.shape)} vs objects {tuple(enhanced.shape[:-1])}")
    idx = align.unsqueeze(-1).expand(*align.shape, enhanced.shape[-1])
    return torch.gather(enhanced, -2, idx)


def merge_aligned(aligned: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """u_j = sum_i alpha_i * aligned[i, j]; aligned from gather_aligned."""
    if alpha.shape != aligned.shape[:-2]:
        raise ShapeError(f"alpha {tuple(alpha.shape)} vs frames {tuple(aligned.shape[:-2])}")
    return torch.einsum("...l,...lnd->...nd", alpha, aligned)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class StepModel(Protocol):
    def initial_state(self, ctx, n: int): ...

    def step(self, ctx, prev_words: torch.Tensor, state) -> tuple[torch.Tensor, object]: ...


class CaptionModel:
    """Parameters plus the forward pass of the full captioner."""

    def __init__(self, params: ParameterStore, vocab_size: int, org_cfg: OrgConfig, dec_cfg: DecoderConfig):
        self.params = params
        self.vocab_size = vocab_size
        self.org_cfg = org_cfg
        self.dec_cfg = dec_cfg

    @classmethod
    def create(cls, vocab_size: int, d_a: int, d_m: int, d_o: int, org_cfg: OrgConfig,
               dec_cfg: DecoderConfig, seed: int, dtype=torch.float32) -> "CaptionModel":
        rng = np.random.default_rng(seed)
        h, w, att, d = dec_cfg.hidden, dec_cfg.word_dim, dec_cfg.att_dim, org_cfg.d
        p = ParameterStore(dtype)
        init_org(p, d_o, d, rng)
        p.add("feat.W_v", glorot_uniform(rng, d_a + d_m, h))
        p.add("feat.b_v", np.zeros(h))
        p.add("embed.W_e", glorot_uniform(rng, vocab_size, w))
        init_lstm(p, "attn_lstm", h + w + h, h, rng)
        p.add("tatt.W_a", glorot_uniform(rng, h, att))
        p.add("tatt.U_a", glorot_uniform(rng, h, att))
        p.add("tatt.w_a", glorot_uniform(rng, att, 1, shape=(att,)))
        p.add("satt.W_b", glorot_uniform(rng, d, att))
        p.add("satt.U_b", glorot_uniform(rng, h, att))
        p.add("satt.w_b", glorot_uniform(rng, att, 1, shape=(att,)))
        init_lstm(p, "lang_lstm", h + d + h, h, rng)
        p.add("out.W_z", glorot_uniform(rng, h, vocab_size))
        p.add("out.b_z", np.zeros(vocab_size))
        return cls(p, vocab_size, org_cfg, dec_cfg)

    def with_params(self, params: ParameterStore) -> "CaptionModel":
        return CaptionModel(params, self.vocab_size, self.org_cfg, self.dec_cfg)

    # -- encoding ------------------------------------------------------------

    def encode(self, appearance, motion, objects, alignment=None, frame_mask=None) -> VideoContext:
        """Inputs are batched ([B, L, ...]). Alignment is computed from the raw
        objects when not supplied."""
        p = self.params
        objects_t = torch.tensor(np.asarray(objects), dtype=p.dtype)
        if alignment is None:
            alignment = np.stack([align_objects(o) for o in np.asarray(objects)])
        v, v_bar = global_features(torch.tensor(np.asarray(appearance), dtype=p.dtype),
                                   torch.tensor(np.asarray(motion), dtype=p.dtype),
                                   p["feat.W_v"], p["feat.b_v"])
        if frame_mask is not None:
            frame_mask = torch.as_tensor(frame_mask, dtype=torch.bool)
            fm = frame_mask.to(v.dtype).unsqueeze(-1)
            v_bar = (v * fm).sum(-2) / fm.sum(-2)
        enhanced = encode_objects(objects_t, self.org_cfg, p)
        return VideoContext(v, v_bar, gather_aligned(enhanced, alignment), frame_mask)

    # -- decoding ------------------------------------------------------------

    def initial_state(self, ctx: VideoContext, n: int | None = None) -> DecoderState:
        n = ctx.batch_size if n is None else n
        h = self.dec_cfg.hidden
        return DecoderState(zero_state(n, h, self.params.dtype), zero_state(n, h, self.params.dtype))

    def decode_step(self, ctx: VideoContext, prev_words, state: DecoderState, log: bool = False):
        """One decoding step; returns (P_t or log P_t, new state)."""
        p = self.params
        prev_words = torch.as_tensor(prev_words, dtype=torch.long)
        ctx = ctx.expand_to(prev_words.shape[0])
        attn = attention_lstm_step(ctx.v_bar, prev_words, state.lang.hidden, state.attn,
                                   p["embed.W_e"], p["attn_lstm.W"], p["attn_lstm.b"])
        alpha, c_g = temporal_attention(ctx.v, attn.hidden, p["tatt.w_a"], p["tatt.W_a"], p["tatt.U_a"],
                                        ctx.frame_mask)
        u = merge_aligned(ctx.aligned, alpha)
        beta, c_l = spatial_attention(u, attn.hidden, p["satt.w_b"], p["satt.W_b"], p["satt.U_b"])
        lang = language_lstm_step(c_g, c_l, attn.hidden, state.lang, p["lang_lstm.W"], p["lang_lstm.b"])
        logits = vocab_logits(lang.hidden, p["out.W_z"], p["out.b_z"])
        dist = log_softmax_stable(logits) if log else softmax_stable(logits)
        return dist, DecoderState(attn, lang, alpha, beta)

    def step(self, ctx, prev_words, state):
        return self.decode_step(ctx, prev_words, state, log=True)

    def teacher_forced(self, ctx: VideoContext, tokens) -> torch.Tensor:
        """Log-probabilities [B, T-1, D] for predicting tokens[:, 1:] from
        the ground-truth prefixes."""
        tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        state = self.initial_state(ctx)
        out = []
        for t in range(tokens.shape[1] - 1):
            logp, state = self.decode_step(ctx, tokens[:, t], state, log=True)
            out.append(logp)
        return torch.stack(out, dim=1)

    # -- persistence ---------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        self.params.save(directory)
        o, d = self.org_cfg, self.dec_cfg
        top_k = "all" if o.top_k is None else o.top_k
        lines = [
            f"vocab_size={self.vocab_size}",
            f"org.mode={o.mode}", f"org.top_k={top_k}", f"org.dim={o.d}",
            f"decoder.hidden={d.hidden}", f"decoder.word_dim={d.word_dim}",
            f"decoder.att_dim={d.att_dim}", f"decoder.beam={d.beam}", f"decoder.max_len={d.max_len}",
        ]
        (Path(directory) / "model.cfg").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory: str | Path, dtype=torch.float32) -> "CaptionModel":
        kv = dict(line.split("=", 1) for line in (Path(directory) / "model.cfg").read_text().split())
        top_k = None if kv["org.top_k"] == "all" else int(kv["org.top_k"])
        org_cfg = OrgConfig(kv["org.mode"], top_k, int(kv["org.dim"]))
        dec_cfg = DecoderConfig(int(kv["decoder.hidden"]), int(kv["decoder.word_dim"]),
                                int(kv["decoder.att_dim"]), int(kv["decoder.beam"]),
                                int(kv["decoder.max_len"]))
        return cls(ParameterStore.load(directory, dtype), int(kv["vocab_size"]), org_cfg, dec_cfg)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


@dataclass
class BeamHypothesis:
    tokens: list[int]  # generated tokens, EOS included when finished
    logprob: float
    finished: bool
    state: object = None

    @property
    def score(self) -> float:
        return self.logprob / max(1, len(self.tokens))

    @property
    def content(self) -> list[int]:
        return self.tokens[:-1] if self.finished else list(self.tokens)


def _select(state, idx):
    if state is None:
        return None
    if isinstance(state, torch.Tensor):
        return state[idx]
    if isinstance(state, tuple):
        return type(state)(*(_select(s, idx) for s in state)) if hasattr(state, "_fields") \
            else tuple(_select(s, idx) for s in state)
    raise TypeError(f"cannot index decoder state of type {type(state).__name__}")


def _allowed_logprobs(logp: torch.Tensor, last_step: bool, banned=BANNED_TOKENS) -> np.ndarray:
    out = logp.detach().to(torch.float64).numpy().copy()
    out[:, list(banned)] = -np.inf
    if last_step:
        keep = out[:, EOS].copy()
        out[:] = -np.inf
        out[:, EOS] = keep
    return out


@torch.no_grad()
def greedy_decode(model: StepModel, ctx, max_len: int, banned=BANNED_TOKENS) -> BeamHypothesis:
    """Argmax decoding, at most max_len content tokens followed by EOS."""
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    state = model.initial_state(ctx, 1)
    prev, tokens, total = BOS, [], 0.0
    for step in range(max_len + 1):
        logp, state = model.step(ctx, torch.tensor([prev]), state)
        scores = _allowed_logprobs(logp, step == max_len, banned)[0]
        w = int(np.argmax(scores))
        if not np.isfinite(scores[w]):
            break
        tokens.append(w)
        total += float(scores[w])
        if w == EOS:
            return BeamHypothesis(tokens, total, True)
        prev = w
    return BeamHypothesis(tokens, total, False)


@torch.no_grad()
def beam_search(model: StepModel, ctx, beam: int, max_len: int, banned=BANNED_TOKENS) -> BeamHypothesis:
    """Length-normalised beam search.

    Each step keeps the `beam` best expansions (by cumulative log-probability,
    ties to lower hypothesis then lower word id); expansions ending in EOS are
    frozen. The final step admits only EOS so content never exceeds max_len.
    Finished hypotheses are ranked by log-probability per generated token.
    `banned` ids are never proposed (reserved tokens by default).
    """
    if beam < 1:
        raise ConfigError("beam must be >= 1")
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    live = [BeamHypothesis([], 0.0, False)]
    state = model.initial_state(ctx, 1)
    finished: list[BeamHypothesis] = []
    for step in range(max_len + 1):
        prev = torch.tensor([h.tokens[-1] if h.tokens else BOS for h in live])
        logp, state = model.step(ctx, prev, state)
        scores = _allowed_logprobs(logp, step == max_len, banned)
        cand = np.array([h.logprob for h in live])[:, None] + scores
        D = cand.shape[1]
        order = np.argsort(-cand, axis=None, kind="stable")[:beam]
        keep, next_live = [], []
        for flat in order:
            h, w = divmod(int(flat), D)
            if not np.isfinite(cand[h, w]):
                break
            hyp = BeamHypothesis(live[h].tokens + [w], float(cand[h, w]), w == EOS)
            if hyp.finished:
                finished.append(hyp)
            else:
                keep.append(h)
                next_live.append(hyp)
        if not next_live:
            live = []
            break
        live = next_live
        state = _select(state, torch.tensor(keep))
    pool = finished or live
    if not pool:
        return BeamHypothesis([], 0.0, False)
    best = pool[0]
    for hyp in pool[1:]:
        if hyp.score > best.score:
            best = hyp
    return best


def generate(model: CaptionModel, ctx: VideoContext, beam: int | None = None,
             max_len: int | None = None) -> list[int]:
    """Content token ids for a single-video context (batch of 1)."""
    beam = model.dec_cfg.beam if beam is None else beam
    max_len = model.dec_cfg.max_len if max_len is None else max_len
    return beam_search(model, ctx, beam, max_len).content
