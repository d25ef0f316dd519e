"""Model files, vocabularies, tokenization and seeded fixture generation.

On disk a model is a directory (or any pair of paths) holding

``model.json``  manifest: format version, hyperparameters, architecture
                choices and a tensor directory (name -> shape, dtype, offset)
``model.bin``   every tensor as little-endian float32, concatenated
``vocab.tsv``   UTF-8 lines ``token<TAB>row``

Tensors are widened to float64 on load.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyInput, FormatError, ShapeError, VersionError
from .model import (
    Hyper,
    LayerNormParams,
    TransformerLayer,
    TransformerModel,
    expected_shapes,
    model_tensors,
    pooled_features,
    sinusoidal_positions,
)

FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)
UNK = "<unk>"
ARCHITECTURE = {
    "residual": "post_ln",
    "pooling": "mean",
    "attention_scale": "inv_sqrt_d_head",
    "ffn_activation": "relu",
    "positional": "stored",
}

BASE_WORDS = (
    ".", ",", "!", "the", "a", "and", "but", "not", "very", "was", "is", "it", "this",
    "food", "good", "bad", "great", "terrible", "service", "place", "staff", "friendly",
    "rude", "delicious", "bland", "love", "hate", "best", "worst", "slow", "fast", "nice",
    "awful", "amazing", "fresh", "cold", "price", "cheap", "clean", "dirty", "never",
    "again", "always", "recommend", "okay", "tasty", "menu", "pizza", "coffee", "movie",
    "plot", "acting", "boring", "fun", "dull", "brilliant", "funny", "sad", "story",
    "music", "film", "worth", "disappointing",
)


# ---------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class VocabTable:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNK:
            raise FormatError(f"vocabulary must reserve row 0 for {UNK}")
        if len(set(self.tokens)) != len(self.tokens):
            raise FormatError("duplicate tokens in vocabulary")
        object.__setattr__(self, "_index", {tok: i for i, tok in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return 0

    def id(self, token: str) -> int:
        return self._index.get(token, 0)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @classmethod
    def default(cls, size: int) -> "VocabTable":
        words = [UNK, *BASE_WORDS]
        words += [f"w{i}" for i in range(len(words), size)]
        return cls(tuple(words[:size]))

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}\n" for i, tok in enumerate(self.tokens)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "VocabTable":
        rows: dict[int, str] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                tok, idx = line.rsplit("\t", 1)
                rows[int(idx)] = tok
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected 'token<TAB>row'") from None
        if sorted(rows) != list(range(len(rows))):
            raise FormatError(f"{path}: row indices are not dense from 0")
        return cls(tuple(rows[i] for i in range(len(rows))))


def tokenize(text: str, vocab: VocabTable, max_len: int | None = None) -> list[int]:
    """Lowercase, split on whitespace, map unknown words to the UNK row."""
    ids = [vocab.id(tok) for tok in text.lower().split()]
    if max_len is not None and len(ids) > max_len:
        warnings.warn(f"input of {len(ids)} tokens clipped to {max_len}", stacklevel=2)
        ids = ids[:max_len]
    return ids


def require_tokens(ids) -> list[int]:
    ids = list(ids)
    if not ids:
        raise EmptyInput("input text has no tokens")
    return ids


# ---------------------------------------------------------------- save / load


def _manifest(model: TransformerModel, weights_name: str) -> tuple[dict, bytes]:
    tensors = {}
    chunks = []
    offset = 0
    for name, arr in model_tensors(model).items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors[name] = {"shape": list(np.shape(arr)), "dtype": "float32", "offset": offset}
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "hyper": asdict(model.hyper),
        "layernorm_mode": model.hyper.layernorm_mode,
        "pooling": model.pooling,
        "vocab_size": model.hyper.vocab_size,
        "architecture": ARCHITECTURE,
        "weights_file": weights_name,
        "byte_order": "little",
        "tensors": tensors,
        "meta": model.meta,
    }
    return manifest, b"".join(chunks)


def save_model(model: TransformerModel, directory, vocab: VocabTable | None = None) -> Path:
    """Write ``model.json``, ``model.bin`` (and ``vocab.tsv``) into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest, blob = _manifest(model, "model.bin")
    (out / "model.bin").write_bytes(blob)
    (out / "model.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if vocab is not None:
        if len(vocab) != model.hyper.vocab_size:
            raise ShapeError(f"vocabulary has {len(vocab)} rows, model expects {model.hyper.vocab_size}")
        vocab.save(out / "vocab.tsv")
    return out / "model.json"


def _resolve(manifest_path) -> Path:
    path = Path(manifest_path)
    return path / "model.json" if path.is_dir() else path


def load_model(manifest_path, weights_path=None) -> TransformerModel:
    """Load and validate a model; ``manifest_path`` may also be its directory."""
    mpath = _resolve(manifest_path)
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc})") from None
    version = manifest.get("format_version")
    if version not in SUPPORTED_VERSIONS:
        raise VersionError(f"unsupported format_version {version!r}; supported {SUPPORTED_VERSIONS}")
    try:
        hyper = Hyper(**manifest["hyper"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad hyperparameter block: {exc}") from None
    if manifest.get("pooling", "mean") != "mean":
        raise FormatError(f"unsupported pooling {manifest.get('pooling')!r}")
    arch = manifest.get("architecture", ARCHITECTURE)
    if arch.get("residual", "post_ln") != "post_ln":
        raise FormatError(f"unsupported residual layout {arch.get('residual')!r}")
    wpath = Path(weights_path) if weights_path else mpath.parent / manifest.get("weights_file", "model.bin")
    blob = wpath.read_bytes()
    directory = manifest.get("tensors", {})
    expected = expected_shapes(hyper)
    arrays: dict[str, np.ndarray] = {}
    used = 0
    for name, shape in expected.items():
        if name not in directory:
            raise ShapeError(f"tensor {name} missing from manifest")
        entry = directory[name]
        if tuple(entry["shape"]) != shape:
            raise ShapeError(f"tensor {name} has shape {tuple(entry['shape'])}, expected {shape}")
        if entry.get("dtype", "float32") != "float32":
            raise FormatError(f"tensor {name}: only float32 storage is supported")
        count = int(np.prod(shape))
        start = int(entry["offset"])
        end = start + 4 * count
        if start < 0 or end > len(blob):
            raise FormatError(f"tensor {name} extends past the end of {wpath.name}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name} contains NaN or inf")
        arrays[name] = arr
        used += 4 * count
    if used != len(blob):
        raise FormatError(f"{wpath.name} has {len(blob)} bytes, manifest accounts for {used}")
    return _assemble(hyper, arrays, manifest.get("meta", {}))


def _assemble(hyper: Hyper, t: dict[str, np.ndarray], meta: dict) -> TransformerModel:
    mode, eps = hyper.layernorm_mode, hyper.layernorm_eps
    layers = []
    for i in range(hyper.num_layers):
        g = lambda k: t[f"layers.{i}.{k}"]  # noqa: E731
        layers.append(TransformerLayer(
            wq=g("wq"), bq=g("bq"), wk=g("wk"), bk=g("bk"), wv=g("wv"), bv=g("bv"),
            wo=g("wo"), bo=g("bo"),
            ln1=LayerNormParams(g("ln1.weight"), g("ln1.bias"), mode, eps),
            w1=g("w1"), b1=g("b1"), w2=g("w2"), b2=g("b2"),
            ln2=LayerNormParams(g("ln2.weight"), g("ln2.bias"), mode, eps),
        ))
    return TransformerModel(hyper, t["embed"], t["pos_enc"], layers, t["head.weight"], t["head.bias"],
                            meta=dict(meta))


def load_vocab(path) -> VocabTable:
    return VocabTable.load(path)


def weights_checksum(directory) -> str:
    return hashlib.sha256((Path(directory) / "model.bin").read_bytes()).hexdigest()


# ---------------------------------------------------------------- fixtures


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def with_layernorm_mode(model: TransformerModel, mode: str) -> TransformerModel:
    """Same weights with a different layer-norm mode (for matched comparisons)."""
    hp = Hyper(**{**asdict(model.hyper), "layernorm_mode": mode})
    layers = [
        TransformerLayer(**{
            **{k: getattr(l, k) for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                                          "w1", "b1", "w2", "b2")},
            "ln1": LayerNormParams(l.ln1.weight, l.ln1.bias, mode, hp.layernorm_eps),
            "ln2": LayerNormParams(l.ln2.weight, l.ln2.bias, mode, hp.layernorm_eps),
        })
        for l in model.layers
    ]
    return TransformerModel(hp, model.embed, model.pos_enc, layers, model.head_w, model.head_b,
                            meta=dict(model.meta))


def generate_fixture(seed: int, hyper: Hyper | None = None, out_dir=None,
                     calibration_len: int = 6, margin_scale: float = 1.5):
    """Deterministic random model plus default vocabulary.

    Embedding rows and positional rows have unit norm, projections are drawn
    with standard deviation 1/sqrt(fan_in), and the classifier head is
    rescaled so clean margins on random inputs have roughly zero mean and
    standard deviation ``margin_scale``. Every tensor is pre-rounded to
    float32 so a save/load round trip is exact.
    """
    hp = hyper or Hyper()
    rng = np.random.default_rng(seed)
    d, f, V = hp.d_model, hp.d_ff, hp.vocab_size

    def proj(out, inp):
        return _f32(rng.normal(size=(out, inp)) / np.sqrt(inp))

    def small(*shape):
        return _f32(0.05 * rng.normal(size=shape))

    embed = rng.normal(size=(V, d))
    embed = _f32(embed / np.linalg.norm(embed, axis=1, keepdims=True))
    pos = sinusoidal_positions(hp.max_len, d)
    pos = _f32(pos / np.linalg.norm(pos, axis=1, keepdims=True))
    layers = []
    for _ in range(hp.num_layers):
        def ln():
            return LayerNormParams(_f32(1.0 + 0.1 * rng.normal(size=d)), small(d),
                                   hp.layernorm_mode, hp.layernorm_eps)
        layers.append(TransformerLayer(
            wq=proj(d, d), bq=small(d), wk=proj(d, d), bk=small(d),
            wv=proj(d, d), bv=small(d), wo=proj(d, d), bo=small(d),
            ln1=ln(), w1=proj(f, d), b1=small(f), w2=proj(d, f), b2=small(d), ln2=ln(),
        ))
    head_w = rng.normal(size=(hp.num_classes, d))
    head_b = np.zeros(hp.num_classes)
    draft = TransformerModel(hp, embed, pos, layers, _f32(head_w), head_b)
    # calibrate the head on random sequences
    n = min(calibration_len, hp.max_len)
    ids = rng.integers(0, V, size=(256, n))
    feats = pooled_features(draft, embed[ids])
    logits = feats @ head_w.T
    spread = np.std(logits[:, :1] - logits[:, 1:])
    head_w = head_w * (margin_scale / max(spread, 1e-12))
    logits = feats @ head_w.T
    head_b = -logits.mean(axis=0)
    meta = {"generator": "seeded", "seed": int(seed)}
    model = TransformerModel(hp, embed, pos, layers, _f32(head_w), _f32(head_b), meta=meta)
    vocab = VocabTable.default(V)
    if out_dir is not None:
        save_model(model, out_dir, vocab)
    return model, vocab


@dataclass
class PlantedFixture:
    """Model with one dominant and one silent position, plus the input it was built for."""

    model: TransformerModel
    vocab: VocabTable
    token_ids: list[int]
    dominant: int  # 1-based
    silent: int  # 1-based


def generate_planted_fixture(seed: int, n: int = 6, content_dims: int = 4, vocab_size: int = 32,
                             dominant_scale: float = 5.0, gate: float = 100.0,
                             target_epsilon: float = 0.05) -> PlantedFixture:
    """Build a model whose margin is linear in each word with a known per-position weight.

    Attention is switched off (all projections zero) and the feed-forward
    block holds one gated pair of ReLU units per non-silent position. The
    positional rows carry a one-hot gate; unit ``u1 = relu(s_i a.c + gate)``
    minus ``u2 = relu(gate)`` leaves ``s_i a.c`` at its own position and zero
    elsewhere, with the gate slope cancelling exactly. ``s_i`` is
    ``dominant_scale`` for the dominant position, U(0.5, 1.5) for the others,
    and the silent position has no unit pair at all. The head is scaled so an
    ``s_i = 1`` position certifies at about ``target_epsilon`` (l2).
    """
    if n < 3:
        raise ValueError("need at least three positions")
    rng = np.random.default_rng(seed)
    dominant, silent = (int(v) for v in rng.choice(n, size=2, replace=False))
    c = content_dims
    g0 = c  # gate dims g0..g0+n-1, then the reference gate
    ref = g0 + n
    o0, o1 = ref + 1, ref + 2
    d = o1 + 1
    active = [i for i in range(n) if i != silent]
    f = 2 * len(active)
    hp = Hyper(num_layers=1, num_heads=1, d_model=d, d_ff=f, max_len=n, vocab_size=vocab_size,
               num_classes=2, layernorm_mode="modified")

    embed = np.zeros((vocab_size, d))
    rows = rng.normal(size=(vocab_size, c))
    embed[:, :c] = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    pos = np.zeros((n, d))
    for i in active:
        pos[i, g0 + i] = 1.0
    a = rng.normal(size=c)
    a -= a.mean()
    a /= np.linalg.norm(a)
    scales = rng.uniform(0.5, 1.5, size=n)
    scales[dominant] = dominant_scale

    w1 = np.zeros((f, d))
    b1 = np.full(f, -gate / 2)
    w2 = np.zeros((d, f))
    for k, i in enumerate(active):
        for unit in (2 * k, 2 * k + 1):
            w1[unit, g0 + i] = gate
            w1[unit, ref] = -gate
        w1[2 * k, :c] = scales[i] * a
        w2[o0, 2 * k], w2[o0, 2 * k + 1] = 1.0, -1.0
        w2[o1, 2 * k], w2[o1, 2 * k + 1] = -1.0, 1.0
    zeros_dd, zeros_d = np.zeros((d, d)), np.zeros(d)
    ln1_w = np.ones(d)
    ln1_w[[o0, o1]] = 0.0
    ln2_w = np.zeros(d)
    ln2_w[[o0, o1]] = 1.0
    layer = TransformerLayer(
        wq=zeros_dd, bq=zeros_d, wk=zeros_dd, bk=zeros_d, wv=zeros_dd, bv=zeros_d,
        wo=zeros_dd, bo=zeros_d,
        ln1=LayerNormParams(ln1_w, zeros_d, "modified", hp.layernorm_eps),
        w1=w1, b1=b1, w2=w2, b2=zeros_d,
        ln2=LayerNormParams(ln2_w, zeros_d, "modified", hp.layernorm_eps),
    )
    # margin = 2h/n * sum_i 2 s_i a.c_i + const, so d(margin)/dx_i has norm 4 h s_i / n
    h = n / (4 * target_epsilon)
    head_w = np.zeros((2, d))
    head_w[0, [o0, o1]] = h / 2, -h / 2
    head_w[1, [o0, o1]] = -h / 2, h / 2
    ids = [int(v) for v in rng.integers(1, vocab_size, size=n)]
    draft = TransformerModel(hp, _f32(embed), _f32(pos), [layer], _f32(head_w), np.zeros(2))
    logits = pooled_features(draft, draft.embeddings(ids)) @ draft.head_w.T
    shift = 1.0 - (logits[0] - logits[1])
    head_b = np.array([shift / 2, -shift / 2])
    meta = {"generator": "planted", "seed": int(seed), "dominant": dominant + 1, "silent": silent + 1}
    model = TransformerModel(hp, _f32(embed), _f32(pos), [layer], _f32(head_w), _f32(head_b), meta=meta)
    return PlantedFixture(model, VocabTable.default(vocab_size), ids, dominant + 1, silent + 1)
