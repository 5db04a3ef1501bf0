"""Deviation-aware distillation: entropy-reweighted soft-label losses,
data-free calibration, scale fine-tuning, and prediction-bias diagnostics.

The loss on a token position is
    total = lambda * H(Pt)^gamma * H(Ps)^(1-gamma) * CE(Pt, Ps) + CE(Pt, Ps)
with natural-log entropies, averaged over positions and batch. 0^0 = 1, so
the gamma endpoints reduce to single-entropy reweighting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .toymodel import TinyDecoder, sample_batch


@dataclass(frozen=True)
class DistillConfig:
    gamma: float = 0.1
    lam: float = 0.1
    learning_rate: float = 1e-5
    batch_size: int = 2
    epochs: int = 1
    calib_samples: int = 512
    calib_len: int = 64
    seed: int = 0
    max_steps: int | None = None
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.lam < 0.0:
            raise ValueError("lambda must be >= 0")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def entropy(p) -> torch.Tensor:
    """Natural-log entropy of probability rows; 0*log0 = 0."""
    p = _as_tensor(p)
    if bool((p < 0).any()):
        raise ValueError("negative probability")
    logp = torch.where(p > 0, torch.log(torch.clamp(p, min=1e-300)), torch.zeros_like(p))
    return -(p * logp).sum(dim=-1)


def entropy_from_logits(logits) -> torch.Tensor:
    logits = _as_tensor(logits)
    logp = F.log_softmax(logits, dim=-1)
    return -(logp.exp() * logp).sum(dim=-1)


def soft_ce(p_t, p_s) -> torch.Tensor:
    """-sum p_t * log p_s per row; terms with p_t = 0 contribute 0."""
    p_t = _as_tensor(p_t)
    p_s = _as_tensor(p_s)
    logps = torch.log(torch.clamp(p_s, min=1e-300))
    return -(torch.where(p_t > 0, p_t * logps, torch.zeros_like(p_t))).sum(dim=-1)


def soft_ce_from_logits(t_logits, s_logits) -> torch.Tensor:
    p_t = F.softmax(_as_tensor(t_logits), dim=-1)
    logps = F.log_softmax(_as_tensor(s_logits), dim=-1)
    return -(p_t * logps).sum(dim=-1)


def _dad_from_parts(h_t, h_s, ce, gamma: float) -> torch.Tensor:
    # torch.pow(0., 0.) == 1, so gamma in {0, 1} drops the matching factor
    return torch.pow(h_t, gamma) * torch.pow(h_s, 1.0 - gamma) * ce


def dad_loss(p_t, p_s, gamma: float) -> torch.Tensor:
    per_pos = _dad_from_parts(entropy(p_t), entropy(p_s), soft_ce(p_t, p_s), gamma)
    return per_pos.mean()


def dad_loss_from_logits(t_logits, s_logits, gamma: float) -> torch.Tensor:
    per_pos = _dad_from_parts(
        entropy_from_logits(t_logits),
        entropy_from_logits(s_logits),
        soft_ce_from_logits(t_logits, s_logits),
        gamma,
    )
    return per_pos.mean()


def total_loss(p_t, p_s, gamma: float, lam: float) -> torch.Tensor:
    return lam * dad_loss(p_t, p_s, gamma) + soft_ce(p_t, p_s).mean()


def total_loss_from_logits(t_logits, s_logits, gamma: float, lam: float) -> torch.Tensor:
    ce = soft_ce_from_logits(t_logits, s_logits)
    dad = _dad_from_parts(
        entropy_from_logits(t_logits),
        entropy_from_logits(s_logits),
        ce,
        gamma,
    )
    return lam * dad.mean() + ce.mean()


def generate_calibration(teacher: TinyDecoder, config: DistillConfig) -> np.ndarray:
    """Sample the calibration set from the teacher itself; no external data."""
    return sample_batch(
        teacher,
        n_sequences=config.calib_samples,
        seq_len=config.calib_len,
        seed=config.seed,
    )


@dataclass
class TraceRow:
    step: int
    ce: float
    dad: float
    total: float
    mean_alpha_drift: float


def finetune_fdb(
    student: TinyDecoder,
    teacher: TinyDecoder,
    calib: np.ndarray,
    config: DistillConfig,
) -> list[TraceRow]:
    """Fine-tune the dual-binarization scale pairs against teacher logits.

    Only (alpha1, alpha2) train; latent weights are frozen and bit planes
    are recomputed from the current thresholds on every forward (straight
    through the step function). After each AdamW step the scale ordering
    alpha2 < 0 < alpha1 + alpha2 < alpha1 is restored by projection.
    """
    layers = [l for l in student.quant_layers().values() if l.mode == "fdb"]
    if not layers:
        raise ValueError("student has no fdb-mode layers")
    params = [p for l in layers for p in (l.alpha1, l.alpha2)]
    init = [p.detach().clone() for p in params]
    opt = torch.optim.AdamW(
        params,
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    calib_t = torch.as_tensor(calib, dtype=torch.long)
    trace: list[TraceRow] = []
    step = 0
    done = False
    for _ in range(config.epochs):
        if done:
            break
        for a in range(0, calib_t.shape[0], config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
            batch = calib_t[a : a + config.batch_size]
            with torch.no_grad():
                t_logits = teacher(batch)
            s_logits = student(batch)
            ce = soft_ce_from_logits(t_logits, s_logits).mean()
            dad = dad_loss_from_logits(t_logits, s_logits, config.gamma)
            loss = config.lam * dad + ce
            opt.zero_grad()
            loss.backward()
            opt.step()
            student.project_scales_()
            drift = float(
                torch.stack(
                    [(p.detach() - p0).abs().mean() for p, p0 in zip(params, init)]
                ).mean()
            )
            trace.append(
                TraceRow(
                    step=step,
                    ce=float(ce.detach()),
                    dad=float(dad.detach()),
                    total=float(loss.detach()),
                    mean_alpha_drift=drift,
                )
            )
            step += 1
    return trace


@dataclass(frozen=True)
class BiasReport:
    head_count: float
    tail_count: float
    head_size: int
    tail_size: int
    head_tail_ratio: float
    n_predictions: int


def head_partition(corpus_tokens, vocab_size: int, head_fraction: float = 0.2) -> np.ndarray:
    """Head token ids: the top `head_fraction` of the vocab by corpus frequency."""
    counts = np.bincount(np.asarray(corpus_tokens), minlength=vocab_size)
    order = np.argsort(-counts, kind="stable")
    n_head = max(1, int(round(head_fraction * vocab_size)))
    return np.sort(order[:n_head])


def head_tail_bias(
    model: TinyDecoder,
    head_ids: np.ndarray,
    n_samples: int = 64,
    ctx_len: int = 32,
    seed: int = 0,
) -> BiasReport:
    """Greedy-prediction counts over model-generated contexts, split into
    head/tail vocabulary partitions and normalized by partition sizes.

    Exact argmax ties split their count equally across the tied tokens, so
    an exactly-uniform predictor scores ratio 1.0.
    """
    head_ids = np.asarray(head_ids)
    vocab = model.config.vocab_size
    is_head = np.zeros(vocab, dtype=bool)
    is_head[head_ids] = True
    contexts = sample_batch(model, n_samples, ctx_len, seed=seed)
    head_count = 0.0
    total = 0
    with torch.no_grad():
        logits = model(torch.as_tensor(contexts, dtype=torch.long)).numpy()
    for seq_logits in logits:
        for pos_logits in seq_logits:
            m = pos_logits.max()
            tied = pos_logits == m
            head_count += tied[is_head].sum() / tied.sum()
            total += 1
    tail_count = total - head_count
    head_size = int(is_head.sum())
    tail_size = vocab - head_size
    denom = tail_count / tail_size
    ratio = float("inf") if denom == 0 else (head_count / head_size) / denom
    return BiasReport(
        head_count=head_count,
        tail_count=tail_count,
        head_size=head_size,
        tail_size=tail_size,
        head_tail_ratio=ratio,
        n_predictions=total,
    )


@dataclass(frozen=True)
class CorrelationReport:
    student_spearman: float
    teacher_spearman: float
    defined: bool
    # rows: (seq, pos, t_entropy, t_nll, s_entropy, s_nll)
    data: np.ndarray = field(repr=False)


def entropy_loss_correlation(
    student: TinyDecoder, teacher: TinyDecoder, eval_seqs: np.ndarray
) -> CorrelationReport:
    """Per-position (prediction entropy, next-token NLL) pairs plus their
    Spearman rank correlation, for both models."""
    from scipy.stats import spearmanr

    rows = []
    seqs = torch.as_tensor(np.asarray(eval_seqs), dtype=torch.long)
    with torch.no_grad():
        for si, seq in enumerate(seqs):
            for model_logits, col in (
                (teacher(seq)[0], 0),
                (student(seq)[0], 1),
            ):
                logp = F.log_softmax(model_logits[:-1], dim=-1)
                ent = -(logp.exp() * logp).sum(dim=-1)
                nll = -logp[torch.arange(seq.numel() - 1), seq[1:]]
                if col == 0:
                    t_ent, t_nll = ent.numpy(), nll.numpy()
                else:
                    s_ent, s_nll = ent.numpy(), nll.numpy()
            for pos in range(seq.numel() - 1):
                rows.append(
                    (si, pos, t_ent[pos], t_nll[pos], s_ent[pos], s_nll[pos])
                )
    data = np.array(rows, dtype=np.float64)
    t_defined = np.std(data[:, 2]) > 0 and np.std(data[:, 3]) > 0
    s_defined = np.std(data[:, 4]) > 0 and np.std(data[:, 5]) > 0
    t_r = float(spearmanr(data[:, 2], data[:, 3]).statistic) if t_defined else float("nan")
    s_r = float(spearmanr(data[:, 4], data[:, 5]).statistic) if s_defined else float("nan")
    return CorrelationReport(
        student_spearman=s_r,
        teacher_spearman=t_r,
        defined=bool(t_defined and s_defined),
        data=data,
    )
