"""Desk-scale decoder-only transformer with quantizable linear layers.

The model is byte-level (vocab 256 by default) and runs in float64 on CPU so
quantized forwards can be compared bit-for-bit against numpy oracles. All
attention/FFN projections are quantizable; embeddings and the LM head stay
full-precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import grouping, quantcore
from .bitplane import unpack
from .quantcore import (
    RANGE_ASYMMETRIC,
    DualBinaryWeight,
    GroupedIntQuant,
    QuantSpec,
    ScalePairs,
)

QUANT_MODES = ("fp", "rtn", "sign", "fdb")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 512
    vocab_size: int = 256
    max_seq_len: int = 64
    quant_mode: str = "fp"
    group_size: int = 64
    range_mode: str = RANGE_ASYMMETRIC  # for rtn mode
    rtn_bits: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.quant_mode not in QUANT_MODES:
            raise ValueError(f"unknown quant_mode {self.quant_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0


class QuantLinear(nn.Module):
    """Linear layer whose weight is either full-precision or a quantized
    reconstruction of a frozen latent weight.

    fdb mode keeps per-group (alpha1, alpha2) as the only trainable
    parameters; bit planes are recomputed from the latent weight and the
    current thresholds on every forward, with gradients passed straight
    through the step function into the alpha factors only.
    """

    def __init__(self, in_features: int, out_features: int, config: ModelConfig):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.config = config
        self.mode = "fp"
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        nn.init.normal_(self.weight, std=0.02)
        self.alpha1: nn.Parameter | None = None
        self.alpha2: nn.Parameter | None = None

    def quantize_(self, mode: str):
        """Freeze the current weight as latent and switch to a quant mode."""
        if mode not in QUANT_MODES:
            raise ValueError(f"unknown quant_mode {mode!r}")
        g = self.config.group_size
        w = self.weight.detach().double().numpy()
        latent = self.weight.detach().clone()
        del self._parameters["weight"]
        self.register_buffer("latent", latent)
        self.mode = mode
        if mode == "fp":
            return
        if mode == "rtn":
            spec = QuantSpec(
                bits=self.config.rtn_bits,
                group_size=g,
                range_mode=self.config.range_mode,
            )
            q = quantcore.rtn_quantize(w, spec)
            self.register_buffer(
                "w_hat", torch.from_numpy(quantcore.dequantize(q))
            )
            self.rtn_payload = q
        elif mode == "sign":
            plane, scales = quantcore.sign_binarize(w, g)
            self.register_buffer(
                "w_hat",
                torch.from_numpy(quantcore.sign_reconstruct(plane, scales, g)),
            )
            self.sign_payload = (plane, scales)
        elif mode == "fdb":
            spec = QuantSpec(bits=2, group_size=g, range_mode=RANGE_ASYMMETRIC)
            pairs = quantcore.fdb_init(quantcore.rtn_quantize(w, spec))
            self.alpha1 = nn.Parameter(torch.from_numpy(pairs.alpha1.copy()))
            self.alpha2 = nn.Parameter(torch.from_numpy(pairs.alpha2.copy()))
            self.register_buffer(
                "degenerate",
                torch.from_numpy(pairs.degenerate_mask().copy()),
            )
            self.register_buffer(
                "init_scale", torch.from_numpy((-pairs.alpha2).copy())
            )

    def _expand(self, per_group: torch.Tensor) -> torch.Tensor:
        idx = torch.arange(self.in_features) // self.config.group_size
        return per_group[:, idx]

    def reconstructed_weight(self) -> torch.Tensor:
        if self.mode == "fp":
            return self.weight if "latent" not in self._buffers else self.latent
        if self.mode in ("rtn", "sign"):
            return self.w_hat
        a1 = self._expand(self.alpha1)
        a2 = self._expand(self.alpha2)
        w = self.latent
        with torch.no_grad():
            b1 = (w - (a1 + a2) / 2.0 >= 0).double()
            b2 = (-(w - a1 * b1 - a2 / 2.0) >= 0).double()
            deg = self._expand(self.degenerate.double())
            b1 = b1 * (1.0 - deg)
            b2 = b2 * (1.0 - deg)
        return a1 * b1 + a2 * b2

    def fdb_payload(self) -> DualBinaryWeight:
        if self.mode != "fdb":
            raise ValueError("layer is not in fdb mode")
        pairs = ScalePairs(
            alpha1=self.alpha1.detach().numpy().copy(),
            alpha2=self.alpha2.detach().numpy().copy(),
        )
        return quantcore.fdb_split(
            self.latent.numpy(), pairs, self.config.group_size
        )

    def project_scales_(self):
        """Restore alpha2 < 0 < alpha1 + alpha2 < alpha1 after an update.

        Margin is 1e-8 times the group's initial scale; degenerate groups
        stay at (0, 0).
        """
        if self.mode != "fdb":
            return
        with torch.no_grad():
            eps = 1e-8 * self.init_scale
            live = ~self.degenerate
            a1, a2 = self.alpha1, self.alpha2
            a2[live] = torch.minimum(a2[live], -eps[live])
            a1[live] = torch.maximum(a1[live], eps[live] - a2[live])
            a1[self.degenerate] = 0.0
            a2[self.degenerate] = 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.reconstructed_weight())


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.q = QuantLinear(d, d, config)
        self.k = QuantLinear(d, d, config)
        self.v = QuantLinear(d, d, config)
        self.o = QuantLinear(d, d, config)
        self.ffn_up = QuantLinear(d, config.d_ffn, config)
        self.ffn_down = QuantLinear(config.d_ffn, d, config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        B, T, d = h.shape
        nh = self.config.n_heads
        hd = d // nh
        q = self.q(h).view(B, T, nh, hd).transpose(1, 2)
        k = self.k(h).view(B, T, nh, hd).transpose(1, 2)
        v = self.v(h).view(B, T, nh, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        mask = torch.triu(torch.ones(T, T, dtype=torch.bool), diagonal=1)
        att = att.masked_fill(mask, float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + self.o(y)
        h = self.ln2(x)
        x = x + self.ffn_down(F.gelu(self.ffn_up(h)))
        return x


class TinyDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_seq_len, config.d_model)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size, bias=False)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        nn.init.normal_(self.head.weight, std=0.02)
        self.double()

    def quant_layers(self) -> dict[str, QuantLinear]:
        return {
            name: mod
            for name, mod in self.named_modules()
            if isinstance(mod, QuantLinear)
        }

    def quantize_(self, mode: str):
        for layer in self.quant_layers().values():
            layer.quantize_(mode)

    def project_scales_(self):
        for layer in self.quant_layers().values():
            layer.project_scales_()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        B, T = tokens.shape
        if T > self.config.max_seq_len:
            raise ValueError(
                f"sequence length {T} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if int(tokens.max()) >= self.config.vocab_size or int(tokens.min()) < 0:
            raise ValueError("token id out of range")
        pos = torch.arange(T)
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


def make_toy_corpus(n_bytes: int = 200_000, seed: int = 0) -> bytes:
    """Repetitive byte-level text: random walks over a small sentence pool,
    hard enough that a tiny model learns structure but quantization hurts."""
    sentences = [
        b"the quick brown fox jumps over the lazy dog. ",
        b"pack my box with five dozen liquor jugs. ",
        b"how vexingly quick daft zebras jump! ",
        b"sphinx of black quartz, judge my vow. ",
        b"the five boxing wizards jump quickly. ",
        b"jived fox nymph grabs quick waltz. ",
    ]
    rng = np.random.default_rng(seed)
    out = bytearray()
    while len(out) < n_bytes:
        out += sentences[int(rng.integers(len(sentences)))]
        if rng.random() < 0.1:
            out += b"\n"
    return bytes(out[:n_bytes])


def quantized_from(teacher: TinyDecoder, **config_overrides) -> TinyDecoder:
    """Copy a full-precision model and quantize it under a new config."""
    from dataclasses import replace

    cfg = replace(teacher.config, **config_overrides)
    model = TinyDecoder(cfg)
    model.load_state_dict(teacher.state_dict())
    if cfg.quant_mode != "fp":
        model.quantize_(cfg.quant_mode)
    return model


def build_model(config: ModelConfig, seed: int = 0) -> TinyDecoder:
    torch.manual_seed(seed)
    model = TinyDecoder(config)
    if config.quant_mode != "fp":
        model.quantize_(config.quant_mode)
    return model


def forward(model: TinyDecoder, tokens) -> np.ndarray:
    """Per-position logits over the vocabulary for one token sequence."""
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    with torch.no_grad():
        return model(tokens)[0].numpy()


def perplexity(model: TinyDecoder, tokens) -> float:
    """exp(mean next-token NLL) over consecutive max_seq_len windows."""
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if tokens.numel() < 2:
        raise ValueError("perplexity needs at least 2 tokens")
    L = model.config.max_seq_len
    total_nll = 0.0
    n_terms = 0
    with torch.no_grad():
        for a in range(0, tokens.numel() - 1, L):
            window = tokens[a : a + L]
            if window.numel() < 2:
                break
            logits = model(window)[0]
            logp = F.log_softmax(logits[:-1], dim=-1)
            nll = -logp[torch.arange(window.numel() - 1), window[1:]]
            total_nll += float(nll.sum())
            n_terms += window.numel() - 1
    return math.exp(total_nll / n_terms)


def sample(
    model: TinyDecoder,
    prompt,
    n_tokens: int,
    temperature: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Ancestral sampling continuing the prompt; deterministic per seed."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    gen = torch.Generator().manual_seed(seed)
    toks = list(np.asarray(prompt, dtype=np.int64).ravel())
    with torch.no_grad():
        for _ in range(n_tokens):
            ctx = torch.tensor(toks[-model.config.max_seq_len :], dtype=torch.long)
            logits = model(ctx)[0, -1]
            probs = F.softmax(logits / temperature, dim=-1)
            toks.append(int(torch.multinomial(probs, 1, generator=gen)))
    return np.array(toks, dtype=np.int64)


def sample_batch(
    model: TinyDecoder,
    n_sequences: int,
    seq_len: int,
    start_token: int = 10,
    temperature: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """Batched ancestral sampling from a fixed start token."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    gen = torch.Generator().manual_seed(seed)
    toks = torch.full((n_sequences, 1), start_token, dtype=torch.long)
    with torch.no_grad():
        while toks.shape[1] < seq_len:
            ctx = toks[:, -model.config.max_seq_len :]
            logits = model(ctx)[:, -1]
            probs = F.softmax(logits / temperature, dim=-1)
            nxt = torch.multinomial(probs, 1, generator=gen)
            toks = torch.cat([toks, nxt], dim=1)
    return toks.numpy()


def train_teacher(
    config: ModelConfig, corpus_tokens, train: TrainConfig
) -> tuple[TinyDecoder, list[float]]:
    """Cross-entropy training of a full-precision teacher with AdamW."""
    corpus = torch.as_tensor(np.asarray(corpus_tokens), dtype=torch.long)
    if int(corpus.max()) >= config.vocab_size:
        raise ValueError("corpus contains token ids outside the vocabulary")
    if corpus.numel() < train.seq_len + 1:
        raise ValueError("corpus shorter than one training window")
    model = build_model(config, seed=train.seed)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=train.lr,
        betas=train.betas,
        weight_decay=train.weight_decay,
    )
    gen = torch.Generator().manual_seed(train.seed + 1)
    losses = []
    for step in range(train.steps):
        starts = torch.randint(
            0, corpus.numel() - train.seq_len - 1, (train.batch_size,), generator=gen
        )
        batch = torch.stack([corpus[a : a + train.seq_len + 1] for a in starts])
        logits = model(batch[:, :-1])
        loss = F.cross_entropy(
            logits.reshape(-1, config.vocab_size), batch[:, 1:].reshape(-1)
        )
        if not torch.isfinite(loss):
            raise RuntimeError(f"training diverged: non-finite loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return model, losses
