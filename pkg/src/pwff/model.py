"""Tiny decoder-only transformer with adapter/LoRA injection and scoring heads.

The language model keeps its base weights frozen once PEFT modules are
injected; adapters (bottleneck residual blocks after the attention and MLP
sub-layers) and LoRA deltas (on the attention query/value projections) are
the only trainable groups. Reward and critic scorers are separate one-layer
transformers with causal mean pooling and a linear scalar head.

All forward passes run over a batch of variable-length sequences by
concatenating them into one token stream and using a block-diagonal causal
attention mask, which keeps the op count independent of batch size.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PARAM_GROUPS = ("base", "adapter", "lora", "reward_head", "critic_head")

MASK_NEG = np.float32(-1e9)

CHECKPOINT_MAGIC = b"PWFF0001"


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 16
    adapter_bottleneck: int = 10
    lora_rank: int = 4
    lora_alpha: float = 8.0
    d_ff: int = 0          # 0 -> 4*d_model
    emb_std: float = 0.3   # token/position embedding init scale

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.adapter_bottleneck < 1:
            raise ValueError("adapter_bottleneck must be >= 1")
        if self.lora_rank < 0:
            raise ValueError("lora_rank must be >= 0")
        if self.lora_rank > self.d_model:
            raise ValueError("lora_rank must be <= d_model")

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff else 4 * self.d_model

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank if self.lora_rank else 0.0


@dataclass(frozen=True)
class ScorerConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 1
    n_heads: int = 2
    max_seq_len: int = 16
    d_ff: int = 128
    emb_std: float = 0.3


# ---------------------------------------------------------------------------
# parameter partition and checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    group: str


class ParamPartition:
    """Named parameter tensors split into disjoint groups.

    The manifest order is the model's parameter insertion order and is the
    canonical serialization order for flatten/unflatten and checkpoints.
    """

    def __init__(self, params: dict[str, Tensor], groups: dict[str, str]):
        if set(params) != set(groups):
            raise ValueError("params and groups must cover the same names")
        for name, group in groups.items():
            if group not in PARAM_GROUPS:
                raise ValueError(f"unknown parameter group {group!r} for {name!r}")
        self.params = params
        self.groups = groups
        self.manifest = [TensorSpec(name, tuple(params[name].shape), groups[name])
                         for name in params]

    def names(self, groups) -> list[str]:
        gset = {groups} if isinstance(groups, str) else set(groups)
        return [s.name for s in self.manifest if s.group in gset]

    def count(self, groups) -> int:
        return sum(int(np.prod(self.params[n].shape)) for n in self.names(groups))

    def flatten(self, groups) -> np.ndarray:
        names = self.names(groups)
        if not names:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([self.params[n].data.reshape(-1) for n in names]).astype(np.float32)

    def unflatten(self, groups, vec: np.ndarray) -> None:
        names = self.names(groups)
        expected = self.count(groups)
        vec = np.asarray(vec, dtype=np.float32)
        if vec.shape != (expected,):
            raise ValueError(f"vector length {vec.shape} != expected ({expected},)")
        off = 0
        for n in names:
            p = self.params[n]
            size = int(np.prod(p.shape))
            p.data[...] = vec[off:off + size].reshape(p.shape)
            off += size

    def manifest_for(self, groups) -> list[TensorSpec]:
        gset = {groups} if isinstance(groups, str) else set(groups)
        return [s for s in self.manifest if s.group in gset]

    def group_hash(self, groups) -> str:
        h = hashlib.sha256()
        for n in self.names(groups):
            h.update(self.params[n].data.astype("<f4").tobytes())
        return h.hexdigest()

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}


def save_checkpoint(partition: ParamPartition, path, meta: dict | None = None) -> int:
    """Write manifest header + little-endian float32 payload; returns payload bytes."""
    header = {
        "tensors": [{"name": s.name, "shape": list(s.shape), "group": s.group}
                    for s in partition.manifest],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(partition.params[s.name].data.astype("<f4").tobytes()
                       for s in partition.manifest)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)
    return len(payload)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    expected = sum(int(np.prod(t["shape"])) for t in header["tensors"])
    if len(payload) != 4 * expected:
        raise ValueError(f"payload is {len(payload)} bytes, manifest predicts {4 * expected}")
    arrays = {}
    off = 0
    for t in header["tensors"]:
        size = int(np.prod(t["shape"]))
        arrays[t["name"]] = np.frombuffer(payload, dtype="<f4", count=size, offset=off * 4) \
            .reshape(t["shape"]).copy()
        off += size
    return header, arrays


def load_into_partition(partition: ParamPartition, path) -> dict:
    header, arrays = load_checkpoint(path)
    names = [t["name"] for t in header["tensors"]]
    if names != [s.name for s in partition.manifest]:
        raise ValueError("checkpoint manifest does not match partition manifest")
    for name, arr in arrays.items():
        p = partition.params[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise ValueError(f"shape mismatch for {name}")
        p.data[...] = arr
    return header["meta"]


# closed-form parameter counts, used by payload accounting tests

def adapter_param_count(d_model: int, bottleneck: int, n_sites: int) -> int:
    per_site = d_model * bottleneck + bottleneck + bottleneck * d_model + d_model
    return n_sites * per_site


def lora_param_count(d_in: int, d_out: int, rank: int, n_sites: int = 1) -> int:
    return n_sites * (rank * d_in + d_out * rank)


# ---------------------------------------------------------------------------
# batched layout (concatenated variable-length blocks)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=512)
def _layout(lengths: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """positions, block-diag causal mask, offsets, block-end indices."""
    total = sum(lengths)
    positions = np.concatenate([np.arange(n, dtype=np.intp) for n in lengths])
    mask = np.full((total, total), MASK_NEG, dtype=np.float32)
    offsets = np.zeros(len(lengths), dtype=np.intp)
    ends = np.zeros(len(lengths), dtype=np.intp)
    off = 0
    for i, n in enumerate(lengths):
        offsets[i] = off
        ends[i] = off + n - 1
        tri = np.triu(np.full((n, n), MASK_NEG, dtype=np.float32), k=1)
        mask[off:off + n, off:off + n] = tri
        off += n
    return positions, mask, offsets, ends


@lru_cache(maxsize=512)
def _pool_matrix(lengths: tuple[int, ...]) -> np.ndarray:
    """Block-diagonal causal mean-pool: row t averages block positions <= t."""
    total = sum(lengths)
    pool = np.zeros((total, total), dtype=np.float32)
    off = 0
    for n in lengths:
        for t in range(n):
            pool[off + t, off:off + t + 1] = 1.0 / (t + 1)
        off += n
    return pool


def _validate_tokens(seqs: list[list[int]], vocab_size: int, max_seq_len: int) -> None:
    for seq in seqs:
        if len(seq) > max_seq_len:
            raise ValueError(f"sequence length {len(seq)} exceeds max_seq_len {max_seq_len}")
        for t in seq:
            if not 0 <= t < vocab_size:
                raise IndexError(f"token id {t} out of range for vocab {vocab_size}")


# ---------------------------------------------------------------------------
# transformer LM
# ---------------------------------------------------------------------------


class TransformerLM:
    """Decoder-only LM; embeddings tied to the output projection."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self.peft_inserted = False
        self.has_adapters = False
        self._partition: ParamPartition | None = None
        self._init_base(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray, group: str, trainable: bool) -> None:
        self.params[name] = ad.tensor(arr.astype(np.float32), requires_grad=trainable)
        self.groups[name] = group

    def _init_base(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, dff = cfg.d_model, cfg.ff_width
        s = 1.0 / np.sqrt(d)
        self._add("wte", rng.normal(0, cfg.emb_std, (cfg.vocab_size, d)), "base", True)
        self._add("wpe", rng.normal(0, cfg.emb_std, (cfg.max_seq_len, d)), "base", True)
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            self._add(p + "ln1.g", np.ones(d), "base", True)
            self._add(p + "ln1.b", np.zeros(d), "base", True)
            for w in ("wq", "wk", "wv", "wo"):
                self._add(p + "attn." + w, rng.normal(0, s, (d, d)), "base", True)
            self._add(p + "ln2.g", np.ones(d), "base", True)
            self._add(p + "ln2.b", np.zeros(d), "base", True)
            self._add(p + "mlp.w1", rng.normal(0, s, (d, dff)), "base", True)
            self._add(p + "mlp.w2", rng.normal(0, 1.0 / np.sqrt(dff), (dff, d)), "base", True)
        self._add("ln_f.g", np.ones(d), "base", True)
        self._add("ln_f.b", np.zeros(d), "base", True)

    def insert_peft(self, seed: int, adapters: bool = True) -> ParamPartition:
        """Inject adapters (2 sites/layer) and LoRA (attention q and v), freeze the base.

        Up-projections and LoRA B matrices start at zero so injection is a
        no-op until the first optimizer step. ``adapters=False`` builds a
        LoRA-only structure; ``lora_rank=0`` builds an adapter-only one.
        """
        if self.peft_inserted:
            raise RuntimeError("PEFT modules already inserted into this model")
        cfg = self.config
        rng = np.random.default_rng(seed)
        d, b, r = cfg.d_model, cfg.adapter_bottleneck, cfg.lora_rank
        lim_d = 1.0 / np.sqrt(d)
        for i in range(cfg.n_layers):
            if adapters:
                for site in ("adapter_attn", "adapter_mlp"):
                    p = f"layer{i}.{site}."
                    self._add(p + "down", rng.uniform(-lim_d, lim_d, (d, b)), "adapter", True)
                    self._add(p + "down_b", np.zeros(b), "adapter", True)
                    self._add(p + "up", np.zeros((b, d)), "adapter", True)
                    self._add(p + "up_b", np.zeros(d), "adapter", True)
            if r > 0:
                for site in ("lora_q", "lora_v"):
                    p = f"layer{i}.{site}."
                    self._add(p + "A", rng.uniform(-lim_d, lim_d, (r, d)), "lora", True)
                    self._add(p + "B", np.zeros((d, r)), "lora", True)
        for name, group in self.groups.items():
            self.params[name].requires_grad = group in ("adapter", "lora")
        self.peft_inserted = True
        self.has_adapters = adapters
        self._partition = None
        return self.partition

    @property
    def partition(self) -> ParamPartition:
        if self._partition is None:
            self._partition = ParamPartition(self.params, self.groups)
        return self._partition

    def clone(self) -> "TransformerLM":
        """Deep copy (data arrays duplicated, flags preserved)."""
        other = object.__new__(TransformerLM)
        other.config = self.config
        other.peft_inserted = self.peft_inserted
        other.has_adapters = self.has_adapters
        other.params = {n: ad.tensor(p.data.copy(), requires_grad=p.requires_grad)
                        for n, p in self.params.items()}
        other.groups = dict(self.groups)
        other._partition = None
        return other

    # -- forward ------------------------------------------------------------

    def _apply_adapter(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = ad.relu(ad.add(ad.matmul(x, p[prefix + "down"]), p[prefix + "down_b"]))
        delta = ad.add(ad.matmul(h, p[prefix + "up"]), p[prefix + "up_b"])
        return ad.add(x, delta)

    def _lora_delta(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        low = ad.matmul(x, ad.transpose(p[prefix + "A"]))
        return ad.mul(ad.matmul(low, ad.transpose(p[prefix + "B"])), self.config.lora_scale)

    def forward_batch(self, seqs: list[list[int]]) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Causal logits for concatenated sequences.

        Returns (logits (sum(T), vocab), block offsets, block end indices).
        """
        cfg = self.config
        _validate_tokens(seqs, cfg.vocab_size, cfg.max_seq_len)
        lengths = tuple(len(s) for s in seqs)
        positions, mask, offsets, ends = _layout(lengths)
        tokens = np.concatenate([np.asarray(s, dtype=np.intp) for s in seqs])
        p = self.params
        hd = cfg.d_model // cfg.n_heads
        scale = 1.0 / np.sqrt(hd)
        has_lora = self.peft_inserted and cfg.lora_rank > 0

        x = ad.add(ad.take_rows(p["wte"], tokens), ad.take_rows(p["wpe"], positions))
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            a = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = ad.matmul(a, p[pre + "attn.wq"])
            v = ad.matmul(a, p[pre + "attn.wv"])
            if has_lora:
                q = ad.add(q, self._lora_delta(a, pre + "lora_q."))
                v = ad.add(v, self._lora_delta(a, pre + "lora_v."))
            k = ad.matmul(a, p[pre + "attn.wk"])
            heads = []
            for h in range(cfg.n_heads):
                lo, hi = h * hd, (h + 1) * hd
                qh, kh, vh = (ad.slice_cols(t, lo, hi) for t in (q, k, v))
                scores = ad.add(ad.mul(ad.matmul(qh, ad.transpose(kh)), scale), mask)
                heads.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
            attn = ad.matmul(ad.concat_cols(heads), p[pre + "attn.wo"])
            x = ad.add(x, attn)
            if self.has_adapters:
                x = self._apply_adapter(x, pre + "adapter_attn.")
            m = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            ff = ad.matmul(ad.gelu(ad.matmul(m, p[pre + "mlp.w1"])), p[pre + "mlp.w2"])
            x = ad.add(x, ff)
            if self.has_adapters:
                x = self._apply_adapter(x, pre + "adapter_mlp.")
        x = ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        logits = ad.matmul(x, ad.transpose(p["wte"]))
        return logits, offsets, ends


def forward_lm(model: TransformerLM, tokens: list[int]) -> Tensor:
    """Causal logits (T, vocab) for a single sequence."""
    logits, _, _ = model.forward_batch([list(tokens)])
    return logits


# ---------------------------------------------------------------------------
# sampling and generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sampler:
    kind: str = "greedy"           # greedy | temperature | top_k
    temperature: float = 1.0
    top_k: int = 0

    def __post_init__(self):
        if self.kind not in ("greedy", "temperature", "top_k"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.kind != "greedy" and self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.kind == "top_k" and self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def _transform_logits(logits: np.ndarray, sampler: Sampler) -> np.ndarray:
    """Logits of the sampling distribution (float64)."""
    z = logits.astype(np.float64)
    if sampler.kind == "greedy":
        return z
    z = z / sampler.temperature
    if sampler.kind == "top_k" and sampler.top_k < z.shape[-1]:
        order = np.argsort(z, kind="stable")
        z = z.copy()
        z[order[:-sampler.top_k]] = -np.inf
    return z


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    if not np.isfinite(m):
        raise ad.NumericsError("all logits masked in sampler")
    s = z - m
    return s - np.log(np.exp(s[np.isfinite(s)]).sum())


def sample_token(logits: np.ndarray, sampler: Sampler, rng: np.random.Generator) -> tuple[int, float]:
    """Draw one token; returns (id, log-prob under the sampling distribution)."""
    z = _transform_logits(logits, sampler)
    logp = _log_softmax(z)
    if sampler.kind == "greedy":
        tok = int(np.argmax(z))
    else:
        probs = np.exp(logp)
        probs = np.where(np.isfinite(logp), probs, 0.0)
        probs /= probs.sum()
        tok = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        tok = min(tok, len(probs) - 1)
    return tok, float(logp[tok])


@dataclass
class Generation:
    tokens: list[int]          # emitted continuation, including the stop token if hit
    logps: np.ndarray          # log-prob of each emitted token
    stopped: bool              # True if the stop token was emitted

    @property
    def response(self) -> list[int]:
        """Continuation with the stop token stripped."""
        return self.tokens[:-1] if self.stopped else list(self.tokens)


def generate_batch(model: TransformerLM, prompts: list[list[int]], max_new: int,
                   sampler: Sampler, rng: np.random.Generator,
                   stop_token: int | None = None) -> list[Generation]:
    """Autoregressive decoding for a batch of prompts.

    Decoding is capped at ``max_seq_len``; per-token log-probs are recorded
    under the sampler's own distribution (so a teacher-forced re-scoring with
    the same transform reproduces them exactly).
    """
    if any(len(p) == 0 for p in prompts):
        raise ValueError("prompts must be non-empty")
    seqs = [list(p) for p in prompts]
    gens = [Generation([], np.zeros(0), False) for _ in prompts]
    logps: list[list[float]] = [[] for _ in prompts]
    alive = [max_new > 0 and len(s) < model.config.max_seq_len for s in seqs]
    for _ in range(max_new):
        if not any(alive):
            break
        idx = [i for i, a in enumerate(alive) if a]
        with ad.no_grad():
            logits, _, ends = model.forward_batch([seqs[i] for i in idx])
        rows = logits.data[ends]
        for j, i in enumerate(idx):
            tok, lp = sample_token(rows[j], sampler, rng)
            seqs[i].append(tok)
            gens[i].tokens.append(tok)
            logps[i].append(lp)
            if stop_token is not None and tok == stop_token:
                gens[i].stopped = True
                alive[i] = False
            elif len(seqs[i]) >= model.config.max_seq_len:
                alive[i] = False
    for g, lp in zip(gens, logps):
        g.logps = np.asarray(lp, dtype=np.float64)
    return gens


def generate(model: TransformerLM, prompt: list[int], max_new: int, sampler: Sampler,
             rng: np.random.Generator | None = None, stop_token: int | None = None) -> Generation:
    rng = rng if rng is not None else np.random.default_rng(0)
    return generate_batch(model, [prompt], max_new, sampler, rng, stop_token)[0]


def sequence_logps(model: TransformerLM, prompts: list[list[int]],
                   continuations: list[list[int]], temperature: float = 1.0,
                   record: bool = False):
    """Teacher-forced log-probs of each continuation token.

    With ``record=False`` returns a list of float64 arrays (one per sequence);
    with ``record=True`` returns (flat Tensor over all continuation tokens,
    per-sequence slice lengths) for use inside a training graph.
    """
    full = [list(p) + list(c) for p, c in zip(prompts, continuations)]
    pick_rows, pick_ids = [], []
    lengths = []
    off = 0
    for p, c in zip(prompts, continuations):
        n = len(p) + len(c)
        for t in range(len(c)):
            pick_rows.append(off + len(p) - 1 + t)
            pick_ids.append(c[t])
        lengths.append(len(c))
        off += n

    def build():
        logits, _, _ = model.forward_batch(full)
        scaled = logits if temperature == 1.0 else ad.mul(logits, 1.0 / temperature)
        picked = ad.take_rows(scaled, np.asarray(pick_rows, dtype=np.intp))
        return ad.log_softmax_pick(picked, np.asarray(pick_ids, dtype=np.intp))

    if record:
        return build(), lengths
    with ad.no_grad():
        flat = build().data.astype(np.float64)
    out = []
    off = 0
    for n in lengths:
        out.append(flat[off:off + n])
        off += n
    return out


# ---------------------------------------------------------------------------
# scoring models (reward / critic)
# ---------------------------------------------------------------------------


class ScoringModel:
    """One-layer transformer encoder + causal mean pooling + linear head.

    ``score`` of a sequence is the pooled head output at its final position;
    per-position outputs double as per-step value estimates, so the same
    architecture serves reward models and critics.
    """

    def __init__(self, config: ScorerConfig, seed: int, group: str):
        if group not in ("reward_head", "critic_head"):
            raise ValueError(f"scorer group must be reward_head or critic_head, got {group!r}")
        self.config = config
        self.group = group
        self.params: dict[str, Tensor] = {}
        self.groups: dict[str, str] = {}
        self._partition: ParamPartition | None = None
        rng = np.random.default_rng(seed)
        d, dff = config.d_model, config.d_ff
        s = 1.0 / np.sqrt(d)
        self._add("wte", rng.normal(0, config.emb_std, (config.vocab_size, d)))
        self._add("wpe", rng.normal(0, config.emb_std, (config.max_seq_len, d)))
        for i in range(config.n_layers):
            p = f"layer{i}."
            self._add(p + "ln1.g", np.ones(d))
            self._add(p + "ln1.b", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                self._add(p + "attn." + w, rng.normal(0, s, (d, d)))
            self._add(p + "ln2.g", np.ones(d))
            self._add(p + "ln2.b", np.zeros(d))
            self._add(p + "mlp.w1", rng.normal(0, s, (d, dff)))
            self._add(p + "mlp.w2", rng.normal(0, 1.0 / np.sqrt(dff), (dff, d)))
        self._add("ln_f.g", np.ones(d))
        self._add("ln_f.b", np.zeros(d))
        self._add("head.w", rng.normal(0, 0.05, (d, 1)))
        self._add("head.b", np.zeros(1))

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = ad.tensor(arr.astype(np.float32), requires_grad=True)
        self.groups[name] = self.group

    @property
    def partition(self) -> ParamPartition:
        if self._partition is None:
            self._partition = ParamPartition(self.params, self.groups)
        return self._partition

    def set_trainable(self, trainable: bool) -> None:
        for p in self.params.values():
            p.requires_grad = trainable

    def clone(self, group: str | None = None) -> "ScoringModel":
        other = object.__new__(ScoringModel)
        other.config = self.config
        other.group = group or self.group
        other.params = {}
        other.groups = {}
        other._partition = None
        for n, p in self.params.items():
            other.params[n] = ad.tensor(p.data.copy(), requires_grad=p.requires_grad)
            other.groups[n] = other.group
        return other

    def pooled_outputs(self, seqs: list[list[int]]) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Per-position pooled scalar outputs (sum(T), 1), plus offsets/ends."""
        cfg = self.config
        _validate_tokens(seqs, cfg.vocab_size, cfg.max_seq_len)
        lengths = tuple(len(s) for s in seqs)
        positions, mask, offsets, ends = _layout(lengths)
        pool = _pool_matrix(lengths)
        tokens = np.concatenate([np.asarray(s, dtype=np.intp) for s in seqs])
        p = self.params
        hd = cfg.d_model // cfg.n_heads
        scale = 1.0 / np.sqrt(hd)

        x = ad.add(ad.take_rows(p["wte"], tokens), ad.take_rows(p["wpe"], positions))
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            a = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = ad.matmul(a, p[pre + "attn.wq"])
            k = ad.matmul(a, p[pre + "attn.wk"])
            v = ad.matmul(a, p[pre + "attn.wv"])
            heads = []
            for h in range(cfg.n_heads):
                lo, hi = h * hd, (h + 1) * hd
                qh, kh, vh = (ad.slice_cols(t, lo, hi) for t in (q, k, v))
                scores = ad.add(ad.mul(ad.matmul(qh, ad.transpose(kh)), scale), mask)
                heads.append(ad.matmul(ad.softmax(scores, axis=-1), vh))
            x = ad.add(x, ad.matmul(ad.concat_cols(heads), p[pre + "attn.wo"]))
            m = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            x = ad.add(x, ad.matmul(ad.gelu(ad.matmul(m, p[pre + "mlp.w1"])), p[pre + "mlp.w2"]))
        x = ad.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
        pooled = ad.matmul(ad.tensor(pool), x)
        out = ad.add(ad.matmul(pooled, p["head.w"]), p["head.b"])
        return out, offsets, ends

    def scores(self, seqs: list[list[int]]) -> Tensor:
        """Scalar score per sequence (pooled over all positions)."""
        out, _, ends = self.pooled_outputs(seqs)
        return ad.take_rows(out, ends)

    def score_values(self, seqs: list[list[int]], index_lists: list[list[int]]) -> Tensor:
        """Pooled outputs at chosen within-sequence positions, flattened."""
        out, offsets, _ = self.pooled_outputs(seqs)
        rows = np.concatenate([offsets[i] + np.asarray(ix, dtype=np.intp)
                               for i, ix in enumerate(index_lists)]) if index_lists else np.zeros(0, np.intp)
        return ad.take_rows(out, rows)


def score_head(scorer: ScoringModel, prompt: list[int], response: list[int]) -> float:
    """Scalar preference score for a (prompt, response) pair.

    An empty response is scored on the prompt-only pooled state.
    """
    seq = list(prompt) + list(response)
    with ad.no_grad():
        return float(scorer.scores([seq]).data[0, 0])
