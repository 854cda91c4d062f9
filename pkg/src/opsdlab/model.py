"""Tiny byte-level decoder-only transformer built on the numcore primitives.

Tokens are raw UTF-8 bytes (0..255) plus four specials: BOS=256, EOS=257,
PAD=258, SEP=259. A prompt encodes as BOS + bytes + SEP and the model is
trained/sampled to produce answer bytes followed by EOS.

The forward pass is written once against the ops interface, so the same code
runs on a Tape (differentiable) or through EagerOps (plain numpy, used for
sampling and evaluation). Any number of leading batch axes is supported; the
attention heads are unrolled in Python to stay inside the primitive set.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numcore import (LAYER_NORM_EPS, ContractError, EagerOps, Tape,
                      as_tensor, k_gelu, k_matmul)

BOS = 256
EOS = 257
PAD = 258
SEP = 259
VOCAB_SIZE = 260

CHECKPOINT_MAGIC = b"OPSDLAB\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 512

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError("d_model must be divisible by n_heads")
        if self.max_seq_len < 2 or self.vocab_size < 5:
            raise ContractError("max_seq_len >= 2 and vocab_size >= 5 required")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in param_shapes(self).values())


# Four-point size ladder for the scale sweep (strictly increasing counts).
DESK_SIZES = {
    "xs": ModelConfig(d_model=32, n_layers=1, n_heads=2),
    "s": ModelConfig(d_model=64, n_layers=2, n_heads=4),
    "m": ModelConfig(d_model=128, n_layers=2, n_heads=4),
    "l": ModelConfig(d_model=128, n_layers=4, n_heads=8),
}


@dataclass(frozen=True)
class DecodingParams:
    temperature: float
    top_p: float
    max_new_tokens: int
    n_samples: int = 1

    def __post_init__(self):
        if self.temperature < 0:
            raise ContractError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ContractError("top_p must be in (0, 1]")


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def encode_prompt(text: str) -> list[int]:
    return [BOS] + encode_text(text) + [SEP]


def decode_tokens(tokens) -> str:
    """Bytes of the non-special tokens, cut at the first EOS."""
    out = bytearray()
    for t in tokens:
        if t == EOS:
            break
        if t < 256:
            out.append(t)
    return out.decode("utf-8", errors="replace")


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple] = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes[p + "ln1.scale"] = (d,)
        shapes[p + "ln1.offset"] = (d,)
        shapes[p + "attn_q"] = (d, d)
        shapes[p + "attn_k"] = (d, d)
        shapes[p + "attn_v"] = (d, d)
        shapes[p + "attn_o"] = (d, d)
        shapes[p + "ln2.scale"] = (d,)
        shapes[p + "ln2.offset"] = (d,)
        shapes[p + "mlp_fc"] = (d, 4 * d)
        shapes[p + "mlp_proj"] = (4 * d, d)
    shapes["ln_f.scale"] = (d,)
    shapes["ln_f.offset"] = (d,)
    shapes["head"] = (d, v)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Normal(0, 0.02) weights, layer-norm scale 1 / offset 0, per-seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".scale"):
            params[name] = np.ones(shape, dtype=np.float64)
        elif name.endswith(".offset"):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return params


def copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


_MASK_CACHE: dict[int, np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    """(n, n) additive mask: 0 on/below the diagonal, -1e30 above."""
    m = _MASK_CACHE.get(n)
    if m is None:
        m = np.triu(np.full((n, n), -1e30), k=1)
        _MASK_CACHE[n] = m
    return m


def register_params(tape: Tape, params: dict[str, np.ndarray], prefix: str = ""):
    return {name: tape.param(prefix + name, arr) for name, arr in params.items()}


def forward_hidden(ops, p, cfg: ModelConfig, tokens: np.ndarray):
    """Final-layer-norm hidden states for a (.., T) int token array."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.shape[-1]
    if n > cfg.max_seq_len:
        raise ContractError(f"sequence length {n} exceeds {cfg.max_seq_len}")
    if tokens.size and tokens.max() >= cfg.vocab_size:
        raise ContractError("token id out of range")
    x = ops.add(ops.embed(p["tok_emb"], tokens),
                ops.embed(p["pos_emb"], np.arange(n)))
    mask = ops.constant(causal_mask(n))
    inv_sqrt_hd = 1.0 / np.sqrt(cfg.head_dim)
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        h = ops.layer_norm(x, p[pre + "ln1.scale"], p[pre + "ln1.offset"])
        q = ops.matmul(h, p[pre + "attn_q"])
        k = ops.matmul(h, p[pre + "attn_k"])
        v = ops.matmul(h, p[pre + "attn_v"])
        attn = None
        for head in range(cfg.n_heads):
            cols = np.arange(head * cfg.head_dim, (head + 1) * cfg.head_dim)
            qh = ops.take_last(q, cols)
            kh = ops.take_last(k, cols)
            vh = ops.take_last(v, cols)
            scores = ops.multiply(ops.matmul(qh, kh, transpose_b=True),
                                  inv_sqrt_hd)
            weights = ops.softmax(ops.add(scores, mask))
            oh = ops.matmul(weights, vh)
            contrib = ops.matmul(oh, ops.embed(p[pre + "attn_o"], cols))
            attn = contrib if attn is None else ops.add(attn, contrib)
        x = ops.add(x, attn)
        h2 = ops.layer_norm(x, p[pre + "ln2.scale"], p[pre + "ln2.offset"])
        m = ops.matmul(ops.gelu(ops.matmul(h2, p[pre + "mlp_fc"])),
                       p[pre + "mlp_proj"])
        x = ops.add(x, m)
    return ops.layer_norm(x, p["ln_f.scale"], p["ln_f.offset"])


def forward_logits(params: dict[str, np.ndarray], cfg: ModelConfig,
                   tokens) -> np.ndarray:
    """(.., T, vocab) next-token logits; row t sees only tokens <= t."""
    ops = EagerOps()
    hid = forward_hidden(ops, params, cfg, np.asarray(tokens, dtype=np.int64))
    return k_matmul(hid, params["head"])


def logits_on_tape(tape: Tape, pnodes, cfg: ModelConfig, tokens,
                   rows=None) -> int:
    """Differentiable logits node; optionally only for the given row indices."""
    hid = forward_hidden(tape, pnodes, cfg, np.asarray(tokens, dtype=np.int64))
    if rows is not None:
        hid = tape.embed(hid, np.asarray(rows, dtype=np.int64))
    return tape.matmul(hid, pnodes["head"])


def sequence_logprob_rows_on_tape(tape: Tape, pnodes, cfg: ModelConfig,
                                  full_tokens, prefix_len: int) -> int:
    """Log-distribution rows for positions prefix_len..len-1, on the tape.

    Row j is the log-probability vector over the vocabulary for the token at
    position prefix_len + j, conditioned on all earlier tokens.
    """
    full_tokens = list(full_tokens)
    if not 1 <= prefix_len < len(full_tokens):
        raise ContractError("need 1 <= prefix_len < len(full_sequence)")
    ctx = full_tokens[:-1]
    rows = np.arange(prefix_len - 1, len(full_tokens) - 1)
    return tape.log_softmax(logits_on_tape(tape, pnodes, cfg, ctx, rows=rows))


def sequence_logprobs(params: dict[str, np.ndarray], cfg: ModelConfig,
                      full_tokens, prefix_len: int) -> np.ndarray:
    """Eager version of sequence_logprob_rows_on_tape."""
    tape = Tape()
    pnodes = register_params(tape, params)
    nid = sequence_logprob_rows_on_tape(tape, pnodes, cfg, full_tokens,
                                        prefix_len)
    return tape.value(nid)


def _fused_last_hidden(params: dict[str, np.ndarray], cfg: ModelConfig,
                       tokens: np.ndarray, lens: np.ndarray) -> np.ndarray:
    """(B, d) hidden state at each row's position lens[b]-1, after final LN.

    Inference-only fast path for sampling: same arithmetic as forward_hidden
    up to floating-point op order, with in-place softmax buffers, heads merged
    by concatenation, and the last layer evaluated only at the query rows the
    sampler reads. Nothing persists across calls.
    """
    nb, width = tokens.shape
    d, nh, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    rows = np.arange(nb)
    mask = causal_mask(width)
    x = params["tok_emb"][tokens] + params["pos_emb"][:width]

    def ln(v, scale, offset):
        mu = v.mean(axis=-1, keepdims=True)
        var = np.square(v - mu).mean(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + LAYER_NORM_EPS) * scale + offset

    inv_sqrt_hd = 1.0 / np.sqrt(hd)
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        last = i == cfg.n_layers - 1
        h = ln(x, params[pre + "ln1.scale"], params[pre + "ln1.offset"])
        k = h @ params[pre + "attn_k"]
        v = h @ params[pre + "attn_v"]
        if last:
            hq = h[rows, lens - 1]              # (B, d): only rows we read
            q = hq @ params[pre + "attn_q"]
            attn = np.empty((nb, d))
            for head in range(nh):
                c = slice(head * hd, (head + 1) * hd)
                s = np.einsum("bd,btd->bt", q[:, c], k[..., c])
                s *= inv_sqrt_hd
                s += mask[lens - 1, :width]
                s -= s.max(axis=-1, keepdims=True)
                np.exp(s, out=s)
                s /= s.sum(axis=-1, keepdims=True)
                attn[:, c] = np.einsum("bt,btd->bd", s, v[..., c])
            x = x[rows, lens - 1] + attn @ params[pre + "attn_o"]
            h2 = ln(x, params[pre + "ln2.scale"], params[pre + "ln2.offset"])
            x = x + k_gelu(h2 @ params[pre + "mlp_fc"]) @ params[pre + "mlp_proj"]
            return ln(x, params["ln_f.scale"], params["ln_f.offset"])
        q = h @ params[pre + "attn_q"]
        attn = np.empty_like(x)
        for head in range(nh):
            c = slice(head * hd, (head + 1) * hd)
            s = q[..., c] @ k[..., c].swapaxes(-1, -2)
            s *= inv_sqrt_hd
            s += mask
            s -= s.max(axis=-1, keepdims=True)
            np.exp(s, out=s)
            s /= s.sum(axis=-1, keepdims=True)
            attn[..., c] = s @ v[..., c]
        x = x + attn @ params[pre + "attn_o"]
        h2 = ln(x, params[pre + "ln2.scale"], params[pre + "ln2.offset"])
        x = x + k_gelu(h2 @ params[pre + "mlp_fc"]) @ params[pre + "mlp_proj"]
    raise AssertionError("unreachable")


def sample_token(logits: np.ndarray, temperature: float, top_p: float,
                 rng: np.random.Generator) -> int:
    """One draw with temperature and nucleus truncation.

    temperature 0 means argmax with ties broken by lowest token id. The
    nucleus keeps the smallest prefix of probability-sorted tokens (ties by
    lowest id) whose cumulative mass reaches top_p, including the token that
    crosses the boundary.
    """
    if temperature == 0.0:
        return int(np.argmax(logits))
    z = logits / temperature
    e = np.exp(z - z.max())
    probs = e / e.sum()
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cut = min(int(np.searchsorted(csum, top_p, side="left")), len(order) - 1)
    kept = order[:cut + 1]
    kept_probs = probs[kept]
    kept_probs /= kept_probs.sum()
    u = rng.random()
    return int(kept[np.searchsorted(np.cumsum(kept_probs), u, side="right")])


SAMPLE_CHUNK = 128


def sample_batch(params: dict[str, np.ndarray], cfg: ModelConfig,
                 prompts: list[list[int]], dec: DecodingParams,
                 seeds: list[int]) -> list[list[int]]:
    """Sample one continuation per prompt, batched with right padding.

    Right padding is exact for a causal model: each row reads its own last
    valid logit row and pad tokens can only be attended by later pad slots.
    Rows are grouped into chunks of similar prompt length (a deterministic
    function of the prompt lengths), finished rows drop out of the batch, and
    each row draws from its own generator, seeded from seeds[row].
    """
    if len(prompts) != len(seeds):
        raise ContractError("one seed per prompt required")
    for pr in prompts:
        if len(pr) + dec.max_new_tokens > cfg.max_seq_len:
            raise ContractError("prompt too long for max_seq_len budget")
    order = sorted(range(len(prompts)), key=lambda b: (len(prompts[b]), b))
    results: list[list[int]] = [None] * len(prompts)  # type: ignore[list-item]
    for start in range(0, len(order), SAMPLE_CHUNK):
        chunk = order[start:start + SAMPLE_CHUNK]
        outs = _sample_chunk(params, cfg, [prompts[b] for b in chunk], dec,
                             [seeds[b] for b in chunk])
        for b, out in zip(chunk, outs):
            results[b] = out
    return results


def _sample_chunk(params, cfg: ModelConfig, prompts: list[list[int]],
                  dec: DecodingParams, seeds: list[int]) -> list[list[int]]:
    seqs = [list(pr) for pr in prompts]
    rngs = [np.random.default_rng(s) for s in seeds]
    active = list(range(len(prompts)))
    new_counts = [0] * len(prompts)
    while active:
        lens = np.asarray([len(seqs[b]) for b in active])
        width = int(lens.max())
        tokens = np.full((len(active), width), PAD, dtype=np.int64)
        for row, b in enumerate(active):
            tokens[row, :lens[row]] = seqs[b]
        hid = _fused_last_hidden(params, cfg, tokens, lens)
        logits = hid @ params["head"]
        still = []
        for row, b in enumerate(active):
            tok = sample_token(logits[row], dec.temperature, dec.top_p,
                               rngs[b])
            seqs[b].append(tok)
            new_counts[b] += 1
            if tok != EOS and new_counts[b] < dec.max_new_tokens:
                still.append(b)
        active = still
    return [seqs[b][len(prompts[b]):] for b in range(len(prompts))]


def sample(params: dict[str, np.ndarray], cfg: ModelConfig, prompt: list[int],
           dec: DecodingParams, rng_seed: int) -> list[int]:
    """Sampled continuation (up to and including EOS) for one prompt."""
    return sample_batch(params, cfg, [list(prompt)], dec, [rng_seed])[0]


# ---------------------------------------------------------------------------
# Checkpoints: magic, u32 header length, JSON header (format version, config,
# tensor names + shapes, metadata), then raw little-endian float64 arrays in
# header order.
# ---------------------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, params: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    names = sorted(params)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": {
            "d_model": cfg.d_model,
            "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads,
            "vocab_size": cfg.vocab_size,
            "max_seq_len": cfg.max_seq_len,
        },
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(as_tensor(params[n]).astype("<f8").tobytes(order="C"))


def load_checkpoint(path):
    """Returns (config, params, meta)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ContractError(
                f"unsupported checkpoint version {header['format_version']}")
        cfg = ModelConfig(**header["config"])
        params = {}
        for t in header["tensors"]:
            shape = tuple(t["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            params[t["name"]] = np.frombuffer(buf, dtype="<f8").reshape(
                shape).astype(np.float64)
    return cfg, params, header.get("meta", {})
