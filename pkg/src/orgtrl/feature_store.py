"""Data model and on-disk formats: feature tensors, manifests, vocabulary,
batching, synthetic data generation and corpus statistics."""

from __future__ import annotations

import json
import string
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConfigError,
    CorruptionError,
    FormatError,
    LoadError,
    ShapeError,
    ValidationError,
)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

TENSOR_MAGIC = b"ORGT"
TENSOR_VERSION = 1
DTYPE_F32 = 1
MANIFEST_FIELDS = ("video_id", "appearance", "motion", "objects", "captions")

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


# ---------------------------------------------------------------------------
# Tensor files
# ---------------------------------------------------------------------------


def as_feature_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Coerce to a C-ordered float32 array and check the tensor invariants."""
    arr = np.asarray(data, dtype=np.float32, order="C")
    if shape is not None:
        if int(np.prod(shape, dtype=np.int64)) != arr.size:
            raise ShapeError(f"shape {list(shape)} does not match {arr.size} elements")
        arr = arr.reshape(tuple(shape))
    if not np.all(np.isfinite(arr)):
        raise ValidationError("tensor contains non-finite values")
    return arr


def write_tensor_file(path: str | Path, tensor) -> None:
    arr = np.asarray(tensor, dtype=np.float32, order="C")
    if arr.ndim > 255:
        raise ShapeError("rank exceeds 255")
    header = TENSOR_MAGIC + bytes([TENSOR_VERSION, DTYPE_F32, arr.ndim])
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


def read_tensor_file(path: str | Path) -> np.ndarray:
    """Read an ORGT tensor file.

    Raises FormatError on a bad magic/version/dtype, CorruptionError when the
    payload length disagrees with the header, ValidationError on NaN/inf.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 7:
        raise CorruptionError(f"{path}: truncated header")
    version, dtype, rank = raw[4], raw[5], raw[6]
    if version != TENSOR_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    dims_end = 7 + 4 * rank
    if len(raw) < dims_end:
        raise CorruptionError(f"{path}: truncated shape header")
    shape = struct.unpack(f"<{rank}I", raw[7:dims_end])
    count = int(np.prod(shape, dtype=np.int64))
    payload = raw[dims_end:]
    if len(payload) != 4 * count:
        raise CorruptionError(
            f"{path}: payload has {len(payload)} bytes, header implies {4 * count}"
        )
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{path}: non-finite values in payload")
    return arr


# ---------------------------------------------------------------------------
# Records and manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    appearance: np.ndarray  # [L, d_a]
    motion: np.ndarray  # [L, d_m]
    objects: np.ndarray  # [L, N, d_o]
    captions: tuple[str, ...]

    def __post_init__(self):
        if self.appearance.ndim != 2 or self.motion.ndim != 2 or self.objects.ndim != 3:
            raise ShapeError(f"{self.video_id}: expected ranks 2/2/3 for appearance/motion/objects")
        L = self.appearance.shape[0]
        if self.motion.shape[0] != L or self.objects.shape[0] != L:
            raise ShapeError(
                f"{self.video_id}: frame counts differ (appearance {L}, "
                f"motion {self.motion.shape[0]}, objects {self.objects.shape[0]})"
            )
        if not self.captions:
            raise ValidationError(f"{self.video_id}: no captions")
        for arr in (self.appearance, self.motion, self.objects):
            arr.flags.writeable = False

    @property
    def num_frames(self) -> int:
        return self.appearance.shape[0]

    @property
    def num_objects(self) -> int:
        return self.objects.shape[1]


def write_manifest(path: str | Path, entries: list[dict]) -> None:
    for e in entries:
        missing = [k for k in MANIFEST_FIELDS if k not in e]
        if missing:
            raise FormatError(f"manifest entry missing fields {missing}")
    doc = {"videos": [{k: e[k] for k in MANIFEST_FIELDS} for e in entries]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_dataset(manifest_path: str | Path) -> list[VideoRecord]:
    """Load every video listed in a JSON manifest, in manifest order.

    Tensor paths are resolved relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("videos"), list):
        raise FormatError(f"{manifest_path}: expected an object with a 'videos' list")
    root = manifest_path.parent
    records = []
    for entry in doc["videos"]:
        missing = [k for k in MANIFEST_FIELDS if k not in entry]
        if missing:
            raise FormatError(f"{manifest_path}: entry missing fields {missing}")
        vid = entry["video_id"]
        streams = {}
        for key in ("appearance", "motion", "objects"):
            p = root / entry[key]
            if not p.is_file():
                raise LoadError(f"{vid}: missing {key} tensor file {p}")
            streams[key] = read_tensor_file(p)
        records.append(VideoRecord(video_id=vid, captions=tuple(entry["captions"]), **streams))
    return records


# ---------------------------------------------------------------------------
# Text
# ---------------------------------------------------------------------------


def tokenize(text: str) -> list[str]:
    """Lowercase, drop ASCII punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


@dataclass
class Vocabulary:
    words: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.words[:4]) != RESERVED:
            raise ValidationError("vocabulary must start with the reserved tokens")
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValidationError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id(self, word: str) -> int:
        return self.index.get(word, UNK)

    def decode(self, ids: Iterable[int]) -> str:
        """Content words up to the first EOS; BOS and PAD are skipped."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (BOS, PAD):
                continue
            out.append(self.words[i])
        return " ".join(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words[4:]))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        return cls(list(RESERVED) + [ln for ln in lines if ln])


def build_vocabulary(captions: Iterable[str], min_count: int = 2) -> Vocabulary:
    """Words with corpus count >= min_count, most frequent first (ties
    lexicographic). Everything else maps to UNK."""
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    counts = Counter(tok for c in captions for tok in tokenize(c))
    if not counts:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    return Vocabulary(list(RESERVED) + kept)


def encode_caption(vocab: Vocabulary, text: str, max_len: int = 24) -> list[int]:
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    ids = [vocab.id(w) for w in tokenize(text)[:max_len]]
    return [BOS] + ids + [EOS]


# ---------------------------------------------------------------------------
# Training examples and batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    video_index: int
    caption_index: int
    caption_id: int
    tokens: tuple[int, ...]


def caption_examples(records: Sequence[VideoRecord], vocab: Vocabulary, max_len: int = 24) -> list[Example]:
    """One example per (video, caption) pair. Caption ids count up through
    the manifest in order and key the soft-target store."""
    out = []
    cid = 0
    for vi, rec in enumerate(records):
        for ci, cap in enumerate(rec.captions):
            out.append(Example(vi, ci, cid, tuple(encode_caption(vocab, cap, max_len))))
            cid += 1
    return out


def sample_one_per_video(examples: Sequence[Example], rng: np.random.Generator) -> list[Example]:
    """Alternative pairing: one randomly drawn caption per video."""
    by_video: dict[int, list[Example]] = {}
    for ex in examples:
        by_video.setdefault(ex.video_index, []).append(ex)
    return [group[rng.integers(len(group))] for _, group in sorted(by_video.items())]


@dataclass
class Batch:
    video_ids: list[str]
    appearance: np.ndarray  # [B, L, d_a]
    motion: np.ndarray  # [B, L, d_m]
    objects: np.ndarray  # [B, L, N, d_o]
    tokens: np.ndarray  # [B, T_max] int64
    lengths: np.ndarray  # [B]
    mask: np.ndarray  # [B, T_max] float32, 1 on non-PAD
    caption_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.video_ids)


def make_batch(examples: Sequence[tuple[VideoRecord, Sequence[int]]], pad_id: int = PAD,
               caption_ids: Sequence[int] | None = None) -> Batch:
    if not examples:
        raise ValidationError("cannot batch an empty list")
    L, N = examples[0][0].num_frames, examples[0][0].num_objects
    for rec, _ in examples:
        if rec.num_frames != L or rec.num_objects != N:
            raise ShapeError(
                f"{rec.video_id}: L={rec.num_frames}, N={rec.num_objects} differs from batch L={L}, N={N}"
            )
    lengths = np.array([len(seq) for _, seq in examples], dtype=np.int64)
    tokens = np.full((len(examples), int(lengths.max())), pad_id, dtype=np.int64)
    for b, (_, seq) in enumerate(examples):
        tokens[b, : len(seq)] = seq
    mask = (np.arange(tokens.shape[1])[None, :] < lengths[:, None]).astype(np.float32)
    return Batch(
        video_ids=[rec.video_id for rec, _ in examples],
        appearance=np.stack([rec.appearance for rec, _ in examples]),
        motion=np.stack([rec.motion for rec, _ in examples]),
        objects=np.stack([rec.objects for rec, _ in examples]),
        tokens=tokens,
        lengths=lengths,
        mask=mask,
        caption_ids=None if caption_ids is None else np.asarray(caption_ids, dtype=np.int64),
    )


def unpad(batch: Batch) -> list[list[int]]:
    return [batch.tokens[b, : batch.lengths[b]].tolist() for b in range(len(batch))]


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

DEFAULT_SUBJECTS = ("man", "woman", "dog", "cat", "child")
DEFAULT_VERBS = ("rides", "throws", "holds", "kicks", "pushes")
DEFAULT_OBJECTS = ("ball", "bike", "box", "car", "chair")


@dataclass(frozen=True)
class SynthConfig:
    videos: int = 20
    frames: int = 8
    objects: int = 4
    d_a: int = 32
    d_m: int = 32
    d_o: int = 32
    noise: float = 0.1
    subjects: tuple[str, ...] = DEFAULT_SUBJECTS
    verbs: tuple[str, ...] = DEFAULT_VERBS
    nouns: tuple[str, ...] = DEFAULT_OBJECTS

    def validate(self) -> None:
        if self.noise < 0:
            raise ConfigError("noise level must be >= 0")
        if min(self.videos, self.frames, self.d_a, self.d_m, self.d_o) < 1:
            raise ConfigError("counts and widths must be positive")
        if self.objects < 2:
            raise ConfigError("need at least 2 object slots (subject and object)")
        if not (self.subjects and self.verbs and self.nouns):
            raise ConfigError("grammar lists must be nonempty")


def synth_caption(subject: str, verb: str, noun: str) -> str:
    return f"a {subject} {verb} a {noun}"


def generate_synthetic(cfg: SynthConfig, seed: int, out_dir: str | Path) -> Path:
    """Write a synthetic dataset (manifest.json + features/) and return the
    manifest path.

    Every video has a latent (subject, verb, object) triple. Appearance and
    motion rows are sums of per-word embeddings plus noise; object slot 0
    carries the subject, slot 1 the object, remaining slots fixed background
    vectors. Slots are rolled by the frame index so objects move between
    slots across frames. Triples are drawn from balanced shuffles so every
    grammar word occurs about videos/len(list) times.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    S, V, O = len(cfg.subjects), len(cfg.verbs), len(cfg.nouns)
    emb_a = rng.standard_normal((S + V, cfg.d_a))
    emb_m = rng.standard_normal((S + V, cfg.d_m))
    emb_subj = rng.standard_normal((S, cfg.d_o))
    emb_obj = rng.standard_normal((O, cfg.d_o))
    background = rng.standard_normal((cfg.objects - 2, cfg.d_o))
    subj_ix = rng.permutation(np.resize(np.arange(S), cfg.videos))
    verb_ix = rng.permutation(np.resize(np.arange(V), cfg.videos))
    obj_ix = rng.permutation(np.resize(np.arange(O), cfg.videos))

    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    L = cfg.frames
    entries = []
    for v in range(cfg.videos):
        s, vb, o = int(subj_ix[v]), int(verb_ix[v]), int(obj_ix[v])
        app = np.tile(emb_a[s] + emb_a[S + vb], (L, 1))
        mot = np.tile(emb_m[s] + emb_m[S + vb], (L, 1))
        slots = np.vstack([emb_subj[s][None], emb_obj[o][None], background])
        objs = np.stack([np.roll(slots, i, axis=0) for i in range(L)])
        app = app + cfg.noise * rng.standard_normal(app.shape)
        mot = mot + cfg.noise * rng.standard_normal(mot.shape)
        objs = objs + cfg.noise * rng.standard_normal(objs.shape)

        vid = f"video{v:04d}"
        paths = {k: f"features/{vid}_{k}.orgt" for k in ("appearance", "motion", "objects")}
        write_tensor_file(out_dir / paths["appearance"], app)
        write_tensor_file(out_dir / paths["motion"], mot)
        write_tensor_file(out_dir / paths["objects"], objs)
        caption = synth_caption(cfg.subjects[s], cfg.verbs[vb], cfg.nouns[o])
        entries.append({"video_id": vid, **paths, "captions": [caption]})
    manifest = out_dir / "manifest.json"
    write_manifest(manifest, entries)
    return manifest


def generate_zipf_corpus(n_captions: int, vocab_size: int, seed: int, exponent: float = 1.1,
                         min_words: int = 5, max_words: int = 12) -> list[str]:
    """Captions over words w0000..w{vocab_size-1} drawn from a Zipf law,
    giving the long-tailed word distribution typical of caption corpora."""
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    p = ranks ** -exponent
    p /= p.sum()
    words = [f"w{i:04d}" for i in range(vocab_size)]
    out = []
    for _ in range(n_captions):
        n = int(rng.integers(min_words, max_words + 1))
        out.append(" ".join(words[i] for i in rng.choice(vocab_size, size=n, p=p)))
    return out


# ---------------------------------------------------------------------------
# Corpus statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FrequencyReport:
    counts: list[tuple[str, int]]
    total: int
    top_n: int
    head_mass: float  # fraction of tokens covered by the top_n words

    @property
    def tail_mass(self) -> float:
        return 1.0 - self.head_mass

    def to_text(self, limit: int | None = None) -> str:
        lines = [
            f"tokens\t{self.total}",
            f"types\t{len(self.counts)}",
            f"top{self.top_n}_mass\t{self.head_mass:.6f}",
            f"tail_mass\t{self.tail_mass:.6f}",
        ]
        lines += [f"{w}\t{c}" for w, c in self.counts[:limit]]
        return "\n".join(lines) + "\n"


def corpus_stats(captions: Iterable[str], top_n: int = 50) -> FrequencyReport:
    counts = Counter(tok for c in captions for tok in tokenize(c))
    total = sum(counts.values())
    if total == 0:
        raise ValidationError("empty corpus")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    head = sum(c for _, c in ordered[:top_n])
    return FrequencyReport(ordered, total, top_n, head / total)
