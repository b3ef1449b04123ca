"""Permutation-invariant encoder/decoder over feature-ID sets.

Encoder: token embedding followed by two induced set attention blocks (ISAB),
giving one row per input token and no positional signal anywhere. Decoder:
attention pooling onto ``n_max`` learnable seed rows (PMA), a self-attention
block, and a row-wise head producing vocabulary logits per output position.
Position ``n`` is trained to emit the ``n``-th smallest selected ID, then PAD.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .records import FeatureSubset, RecordStore, augment_permutations
from .seeding import derive_seed

CHECKPOINT_VERSION = 1


class EmptyReconstruction(ValueError):
    """Every output position decoded to PAD."""


@dataclass
class CodecConfig:
    universe_size: int
    d: int = 128
    heads: int = 4
    M: int = 32
    n_max: int | None = None
    pool_width: int = 32
    ff_width: int | None = None
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 50
    augment: int = 25
    condition_on: str = "pooled"
    ln_eps: float = 1e-5
    record_weighting: bool = False

    def __post_init__(self):
        if self.n_max is None:
            self.n_max = self.universe_size
        if self.ff_width is None:
            self.ff_width = self.d
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.condition_on not in ("pooled", "tokens"):
            raise ValueError("condition_on must be 'pooled' or 'tokens'")

    @property
    def pad(self) -> int:
        return self.universe_size

    @property
    def vocab(self) -> int:
        # feature IDs, PAD, one reserved slot
        return self.universe_size + 2

    @property
    def K(self) -> int:
        return self.n_max


# ---------------------------------------------------------------- blocks

class RowFF(nn.Module):
    """Row-wise two-layer feedforward net."""

    def __init__(self, d_in, hidden, d_out):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, d_out)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class MultiheadAttention(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.d, self.heads = d, heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, Q, K, V, key_mask=None):
        B, nq, d = Q.shape
        nk = K.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(Q).view(B, nq, h, dh).transpose(1, 2)
        k = self.k(K).view(B, nk, h, dh).transpose(1, 2)
        v = self.v(V).view(B, nk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, nq, d))


class MAB(nn.Module):
    """LayerNorm(H + rFF(H)) with H = LayerNorm(Q + Multihead(Q, K, V))."""

    def __init__(self, d, heads, ff_width=None, eps=1e-5):
        super().__init__()
        self.attn = MultiheadAttention(d, heads)
        self.ln1 = nn.LayerNorm(d, eps=eps)
        self.ff = RowFF(d, ff_width or d, d)
        self.ln2 = nn.LayerNorm(d, eps=eps)

    def forward(self, Q, K, V=None, key_mask=None):
        V = K if V is None else V
        H = self.ln1(Q + self.attn(Q, K, V, key_mask))
        return self.ln2(H + self.ff(H))


class ISAB(nn.Module):
    """MAB(X, H, H) with H = MAB(I, X, X) over ``M`` learnable inducing rows."""

    def __init__(self, d, heads, M, ff_width=None, eps=1e-5):
        super().__init__()
        self.inducing = nn.Parameter(torch.empty(M, d))
        nn.init.uniform_(self.inducing, -1 / math.sqrt(d), 1 / math.sqrt(d))
        self.mab_in = MAB(d, heads, ff_width, eps)
        self.mab_out = MAB(d, heads, ff_width, eps)

    def forward(self, X, mask=None):
        I = self.inducing.unsqueeze(0).expand(X.shape[0], -1, -1)
        H = self.mab_in(I, X, X, key_mask=mask)
        return self.mab_out(X, H, H)


class PMA(nn.Module):
    """MAB(S, rFF(E), rFF(E)) over ``K`` learnable seed rows."""

    def __init__(self, d, heads, K, pool_width=32, ff_width=None, eps=1e-5):
        super().__init__()
        self.seeds = nn.Parameter(torch.empty(K, d))
        nn.init.uniform_(self.seeds, -1 / math.sqrt(d), 1 / math.sqrt(d))
        self.rff = RowFF(d, pool_width, d)
        self.mab = MAB(d, heads, ff_width, eps)

    def forward(self, E, mask=None):
        S = self.seeds.unsqueeze(0).expand(E.shape[0], -1, -1)
        Z = self.rff(E)
        return self.mab(S, Z, Z, key_mask=mask)


# ---------------------------------------------------------------- codec

class SetCodec(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        c = self.config = config
        self.embed = nn.Embedding(c.vocab, c.d)
        nn.init.uniform_(self.embed.weight, -1.0, 1.0)
        self.isab1 = ISAB(c.d, c.heads, c.M, c.ff_width, c.ln_eps)
        self.isab2 = ISAB(c.d, c.heads, c.M, c.ff_width, c.ln_eps)
        self.pma = PMA(c.d, c.heads, c.K, c.pool_width, c.ff_width, c.ln_eps)
        self.dec_mab = MAB(c.d, c.heads, c.ff_width, c.ln_eps)
        self.head = RowFF(c.d, c.d, c.vocab)

    @property
    def dtype(self):
        return self.embed.weight.dtype

    def encode_tokens(self, tokens, mask):
        x = self.embed(tokens)
        return self.isab2(self.isab1(x, mask), mask)

    def pool(self, E, mask=None):
        return self.pma(E, mask)

    def logits_from_pooled(self, P):
        return self.head(self.dec_mab(P, P, P))

    def forward(self, tokens, mask):
        E = self.encode_tokens(tokens, mask)
        if self.config.condition_on == "tokens":
            return self.head(E)
        return self.logits_from_pooled(self.pool(E, mask))


def build_codec(config: CodecConfig, seed: int = 0, dtype=torch.float32) -> SetCodec:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        codec = SetCodec(config)
    return codec.to(dtype)


@dataclass
class SubsetEmbedding:
    E: torch.Tensor
    pooled: torch.Tensor
    source_length: int


# ---------------------------------------------------------------- functional API

def _batched(x):
    return (x.unsqueeze(0), True) if x.dim() == 2 else (x, False)


def mab(Q, K, V, block: MAB):
    """Apply ``block`` to unbatched ``(n, d)`` or batched ``(B, n, d)`` inputs."""
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ValueError(f"shape mismatch: Q{tuple(Q.shape)} K{tuple(K.shape)} V{tuple(V.shape)}")
    for t in (Q, K, V):
        if not torch.isfinite(t).all():
            raise ValueError("non-finite attention input")
    (Qb, squeeze), (Kb, _), (Vb, _) = _batched(Q), _batched(K), _batched(V)
    out = block(Qb, Kb, Vb)
    return out[0] if squeeze else out


def isab(X, block: ISAB):
    Xb, squeeze = _batched(X)
    out = block(Xb)
    return out[0] if squeeze else out


def pma(E, block: PMA):
    if E.shape[-2] < 1:
        raise ValueError("PMA needs at least one input row")
    Eb, squeeze = _batched(E)
    out = block(Eb)
    return out[0] if squeeze else out


def _tokens(ids, config: CodecConfig):
    ids = list(getattr(ids, "ids", ids))
    if not ids:
        raise ValueError("cannot encode an empty subset")
    if len(ids) > config.n_max:
        raise ValueError(f"subset length {len(ids)} exceeds n_max={config.n_max}")
    if min(ids) < 0 or max(ids) >= config.universe_size:
        raise ValueError(f"unknown token in {ids}")
    return ids


def encode(f, codec: SetCodec) -> SubsetEmbedding:
    ids = _tokens(f, codec.config)
    tokens = torch.tensor([ids], dtype=torch.long)
    mask = torch.ones_like(tokens, dtype=torch.bool)
    with torch.no_grad():
        E = codec.encode_tokens(tokens, mask)
        P = codec.pool(E, mask)
    return SubsetEmbedding(E[0], P[0], len(ids))


def encode_batch(subsets, codec: SetCodec) -> torch.Tensor:
    """Pooled embeddings ``(B, K, d)`` for a list of subsets."""
    tokens, mask = pad_batch([_tokens(f, codec.config) for f in subsets], codec.config)
    with torch.no_grad():
        return codec.pool(codec.encode_tokens(tokens, mask), mask)


def ids_from_logits(logits, config: CodecConfig) -> tuple[int, ...]:
    """Per-position argmax, PAD/reserved dropped, duplicates collapsed, sorted."""
    picks = logits.argmax(dim=-1).tolist()
    ids = sorted({int(t) for t in picks if t < config.universe_size})
    if not ids:
        raise EmptyReconstruction("empty reconstruction: every position decoded to PAD")
    return tuple(ids)


def decode_pooled(P, codec: SetCodec) -> FeatureSubset:
    with torch.no_grad():
        logits = codec.logits_from_pooled(P.reshape(1, codec.config.K, codec.config.d))[0]
    return FeatureSubset(ids_from_logits(logits, codec.config), codec.config.universe_size)


def decode(embedding: SubsetEmbedding, codec: SetCodec) -> FeatureSubset:
    if codec.config.condition_on == "tokens":
        with torch.no_grad():
            logits = codec.head(embedding.E)
        return FeatureSubset(ids_from_logits(logits, codec.config), codec.config.universe_size)
    if tuple(embedding.pooled.shape) != (codec.config.K, codec.config.d):
        raise ValueError(f"pooled embedding must be {(codec.config.K, codec.config.d)}")
    return decode_pooled(embedding.pooled, codec)


# ---------------------------------------------------------------- loss

def target_sequence(f, config: CodecConfig) -> list[int]:
    ids = list(getattr(f, "ids", f))
    if len(ids) > config.n_max:
        raise ValueError(f"target length {len(ids)} exceeds n_max={config.n_max}")
    seq = sorted(ids) if config.condition_on == "pooled" else ids
    return seq + [config.pad] * (config.n_max - len(seq))


def reconstruction_loss(f, logits, config: CodecConfig):
    """Summed NLL of the padded target over all ``n_max`` positions (PAD included)."""
    target = torch.tensor(target_sequence(f, config), dtype=torch.long)
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, target[:, None]).sum()


def batch_nll(logits, targets):
    """Per-sample summed NLL for ``(B, K, V)`` logits and ``(B, K)`` targets."""
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1).sum(dim=-1)


def pad_batch(seqs, config: CodecConfig):
    tokens = torch.full((len(seqs), config.n_max), config.pad, dtype=torch.long)
    mask = torch.zeros((len(seqs), config.n_max), dtype=torch.bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
        mask[i, : len(s)] = True
    return tokens, mask


# ---------------------------------------------------------------- training

def training_examples(store: RecordStore, config: CodecConfig, seed: int):
    seqs, weights = [], []
    for i, rec in enumerate(store):
        for aug in augment_permutations(rec, config.augment, derive_seed(seed, "augment", i)):
            seqs.append(aug.subset.ids)
            weights.append(float(rec.client_sample_count or 1))
    w = np.asarray(weights)
    w = w / w.mean() if config.record_weighting else np.ones_like(w)
    return seqs, w


def train_codec(store: RecordStore, config: CodecConfig, seed: int = 0, dtype=torch.float32,
                codec: SetCodec | None = None, log_every: int = 0):
    """Fit the codec on permutation-augmented records with Adam.

    Returns ``(codec, losses)``; ``losses[e]`` is the mean per-record NLL in
    epoch ``e``. With ``config.record_weighting`` each record's loss is scaled
    by its client's sample count.
    """
    if len(store) == 0:
        raise ValueError("cannot train on an empty record store")
    longest = max(len(r.subset) for r in store)
    if longest > config.n_max:
        raise ValueError(f"record of length {longest} exceeds n_max={config.n_max}")
    codec = codec or build_codec(config, derive_seed(seed, "init"), dtype)
    seqs, weights = training_examples(store, config, seed)
    tokens, mask = pad_batch(seqs, config)
    targets = torch.stack([torch.tensor(target_sequence(s, config)) for s in seqs])
    w = torch.tensor(weights, dtype=codec.dtype)
    opt = torch.optim.Adam(codec.parameters(), lr=config.lr)
    rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    losses = []
    codec.train()
    for epoch in range(config.epochs):
        order = torch.from_numpy(rng.permutation(len(seqs)))
        total = 0.0
        for start in range(0, len(seqs), config.batch):
            idx = order[start: start + config.batch]
            nll = batch_nll(codec(tokens[idx], mask[idx]), targets[idx])
            loss = (nll * w[idx]).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        epoch_loss = total / len(seqs)
        if not math.isfinite(epoch_loss):
            raise FloatingPointError(f"codec training diverged at epoch {epoch}")
        losses.append(epoch_loss)
        if log_every and (epoch + 1) % log_every == 0:
            print(f"codec epoch {epoch + 1}/{config.epochs} loss {epoch_loss:.4f}")
    codec.eval()
    return codec, losses


def reconstruction_accuracy(codec: SetCodec, subsets) -> float:
    """Fraction of subsets whose decoded canonical set equals their own."""
    P = encode_batch(subsets, codec)
    hits = 0
    for f, p in zip(subsets, P):
        try:
            hits += decode_pooled(p, codec).canonical == tuple(sorted(getattr(f, "ids", f)))
        except EmptyReconstruction:
            pass
    return hits / len(subsets)


# ---------------------------------------------------------------- persistence

def save_checkpoint(codec: SetCodec, path) -> None:
    state = {k: v.detach().cpu() for k, v in codec.state_dict().items()}
    torch.save({
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(codec.config),
        "dtype": str(codec.dtype).replace("torch.", ""),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state_dict": state,
    }, path)


def load_checkpoint(path) -> SetCodec:
    blob = torch.load(path, weights_only=True)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {blob.get('format_version')!r}")
    config = CodecConfig(**blob["config"])
    codec = SetCodec(config).to(getattr(torch, blob["dtype"]))
    for k, shape in blob["shapes"].items():
        if list(blob["state_dict"][k].shape) != shape:
            raise ValueError(f"tensor {k} does not match its declared shape {shape}")
    codec.load_state_dict(blob["state_dict"])
    codec.eval()
    return codec


def export_embeddings(codec: SetCodec, store: RecordStore, path) -> int:
    """Write ``{"record", "ids", "perf", "pooled"}`` JSON lines for external plotting."""
    lines = []
    for i, rec in enumerate(store):
        emb = encode(rec.subset, codec)
        lines.append(json.dumps({
            "record": i, "ids": list(rec.subset.ids), "perf": rec.perf,
            "pooled": emb.pooled.double().numpy().round(6).tolist(),
        }))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
    return len(lines)


# ---------------------------------------------------------------- cost accounting

def count_flops(fn, *args) -> int:
    """Floating-point operations torch dispatches while running ``fn(*args)``."""
    from torch.utils.flop_counter import FlopCounterMode

    counter = FlopCounterMode(display=False)
    with counter:
        fn(*args)
    return counter.get_total_flops()


def isab_matmul_flops(n: int, M: int, d: int, ff_width: int | None = None) -> int:
    """Closed-form matmul FLOPs of one ISAB on ``n`` rows (2 per multiply-add)."""
    f = ff_width or d

    def mab_cost(nq, nk):
        proj = 2 * d * d * (nq + 2 * nk) + 2 * d * d * nq
        attn = 2 * nq * nk * d * 2
        ff = 2 * nq * (d * f + f * d)
        return proj + attn + ff

    return mab_cost(M, n) + mab_cost(n, M)
