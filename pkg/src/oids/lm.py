"""Small decoder-only LM with an identifier-extended vocabulary.

The model is a pre-LN transformer implemented directly on numpy with a
hand-written backward pass. Object information enters through the system
message: the bracketed region is replaced wholesale by the assembled
scene sequence, so identifier rows, projected features, and (in early
fusion) fused vectors sit at those positions as continuous embeddings.

Training minimises the mean negative log-likelihood of the response
tokens only; the system and user text are frozen context. The unembedding
matrix is tied to the input embeddings (base rows plus, outside
plain-text mode, the identifier table), so identifier logits and
identifier embeddings are one set of weights.

Numerics: weights and activations in float32 (float64 for gradient
checks via ``astype``); log-softmax and loss reduction in float64 with a
canonical reduction order, so batch order cannot change the loss value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .assembly import (
    FUSION_EARLY,
    FUSION_MODES,
    FUSION_PLAIN,
    FUSION_SEPARATE,
    IDENT_LEARNABLE,
    IDENT_PLAIN,
    IDENTIFIER_MODES,
    AssemblyCache,
    FuseLayer,
    IdentifierTable,
    Projector,
    SceneSequence,
    build_scene_sequence,
    check_modes,
    gelu,
    gelu_grad,
)
from .errors import ConfigError, NumericError
from .features import ObjectFeatures
from .rand import derive_rng
from .scene import Scene
from .tasks import QAInstance
from .vocab import Vocab

__all__ = [
    "LMConfig",
    "TrainConfig",
    "TrainingExample",
    "EmbeddedInstance",
    "GroundedLM",
    "embed_instance",
    "prepare_instance",
    "loss",
    "loss_and_grads",
    "gradient_check_model",
    "train",
    "generate",
    "respond",
    "lr_at_step",
]

_NEG = -1e30


@dataclass(frozen=True)
class LMConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    n_ctx: int = 512
    n_identifiers: int = 16
    fusion: str = FUSION_SEPARATE
    identifier_mode: str = IDENT_LEARNABLE
    d3: int = 64
    d2: int = 64

    def __post_init__(self):
        if self.d_model <= 0 or self.n_layers <= 0 or self.n_heads <= 0:
            raise ConfigError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads"
            )
        if self.n_ctx <= 0 or self.n_identifiers <= 0:
            raise ConfigError("context and identifier count must be positive")
        if self.fusion not in FUSION_MODES or self.identifier_mode not in IDENTIFIER_MODES:
            raise ConfigError("unknown fusion or identifier mode")
        check_modes(self.identifier_mode, self.fusion)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "n_ctx": self.n_ctx,
            "n_identifiers": self.n_identifiers,
            "fusion": self.fusion,
            "identifier_mode": self.identifier_mode,
            "d3": self.d3,
            "d2": self.d2,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LMConfig":
        return cls(**{k: doc[k] for k in cls().to_dict()})


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-4
    batch_size: int = 8
    epochs: int = 3
    warmup_steps: int = 20
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.base_lr < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("learning rate and epochs must be non-negative, batch size positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("invalid optimizer constants")
        if self.warmup_steps < 0 or self.grad_clip <= 0:
            raise ConfigError("warmup and clip must be non-negative / positive")


@dataclass(frozen=True)
class TrainingExample:
    qa: QAInstance
    scene: Scene
    features: dict[int, ObjectFeatures]


@dataclass
class EmbeddedInstance:
    """Spliced input: rows per position, ids for text, mask on responses."""

    embeddings: np.ndarray          # (T, d) token/injection rows, positions excluded
    token_ids: np.ndarray           # (T,) int64; -1 at injected positions
    loss_mask: np.ndarray           # (T,) bool; True on response positions
    scene_start: int                # index of the scene sequence's "[" row
    scene_seq: SceneSequence
    scene_cache: AssemblyCache | None = None

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


class GroundedLM:
    """Transformer weights plus the projection/identifier components."""

    def __init__(self, vocab: Vocab, config: LMConfig, params, proj3d, proj2d, fuse, table):
        if vocab.n_identifiers < config.n_identifiers:
            raise ConfigError("vocabulary has fewer identifier tokens than the config")
        check_modes(table.mode, config.fusion)
        self.vocab = vocab
        self.config = config
        self.params = params
        self.proj3d = proj3d
        self.proj2d = proj2d
        self.fuse = fuse
        self.table = table

    # -- construction --------------------------------------------------------

    @classmethod
    def create(cls, vocab: Vocab, config: LMConfig, seed: int = 0, dtype=np.float32):
        d, L = config.d_model, config.n_layers
        rng = derive_rng("lm-init", seed)
        params: dict[str, np.ndarray] = {}

        def normal(shape, std):
            return (rng.standard_normal(shape) * std).astype(dtype)

        resid_std = 0.02 / math.sqrt(2.0 * L)
        params["embed"] = normal((vocab.base_size, d), 0.02)
        params["pos"] = normal((config.n_ctx, d), 0.02)
        for i in range(L):
            p = f"l{i}."
            params[p + "ln1.g"] = np.ones(d, dtype=dtype)
            params[p + "ln1.b"] = np.zeros(d, dtype=dtype)
            # mimetic attention init: W_K repeats W_Q so QK^T starts near a
            # similarity kernel, and W_O is a scaled transpose of W_V so OV
            # starts near +0.5*I (attend-alike rows get softly copied into
            # the stream). A fresh stack then owns rough retrieval/copy
            # behaviour from step 0 instead of having to discover it, which
            # matters at desk scale where budgets are thousands of steps.
            params[p + "attn.wq"] = normal((d, d), 0.035)
            params[p + "attn.wk"] = params[p + "attn.wq"].copy()
            wv = normal((d, d), 0.02)
            params[p + "attn.wv"] = wv
            params[p + "attn.wo"] = np.ascontiguousarray(
                wv.T * (0.5 / (d * 0.02**2)), dtype=dtype
            )
            params[p + "ln2.g"] = np.ones(d, dtype=dtype)
            params[p + "ln2.b"] = np.zeros(d, dtype=dtype)
            params[p + "mlp.w_up"] = normal((d, 4 * d), 0.02)
            params[p + "mlp.b_up"] = np.zeros(4 * d, dtype=dtype)
            params[p + "mlp.w_down"] = normal((4 * d, d), resid_std)
            params[p + "mlp.b_down"] = np.zeros(d, dtype=dtype)
        params["ln_f.g"] = np.ones(d, dtype=dtype)
        params["ln_f.b"] = np.zeros(d, dtype=dtype)

        proj3d = Projector.create(config.d3, d, derive_rng("lm-init", seed, "proj3d"), dtype)
        proj2d = Projector.create(config.d2, d, derive_rng("lm-init", seed, "proj2d"), dtype)
        fuse = None
        if config.fusion == FUSION_EARLY:
            fuse = FuseLayer.create(d, derive_rng("lm-init", seed, "fuse"), dtype)
        table = IdentifierTable.create(
            config.identifier_mode,
            config.n_identifiers,
            d,
            derive_rng("lm-init", seed, "identifiers"),
            base_table=params["embed"],
            dtype=dtype,
        )
        return cls(vocab, config, params, proj3d, proj2d, fuse, table)

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def named_parameters(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        for name, arr in self.proj3d.parameters().items():
            out[f"proj3d.{name}"] = arr
        for name, arr in self.proj2d.parameters().items():
            out[f"proj2d.{name}"] = arr
        if self.fuse is not None:
            for name, arr in self.fuse.parameters().items():
                out[f"fuse.{name}"] = arr
        for name, arr in self.table.parameters().items():
            out[f"identifiers.{name}"] = arr
        return out

    def trainable_names(self) -> set[str]:
        names = set(self.named_parameters())
        if not self.table.trainable:
            names.discard("identifiers.embeddings")
        return names

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v) for k, v in self.named_parameters().items()}

    @classmethod
    def from_tensors(cls, vocab: Vocab, config: LMConfig, tensors: dict):
        def grab(prefix):
            return {k[len(prefix):]: np.array(tensors[k]) for k in tensors if k.startswith(prefix)}

        params = {
            k: np.array(v)
            for k, v in tensors.items()
            if not k.startswith(("proj3d.", "proj2d.", "fuse.", "identifiers."))
        }
        p3 = grab("proj3d.")
        p2 = grab("proj2d.")
        proj3d = Projector(p3["w1"], p3["b1"], p3["w2"], p3["b2"], p3["w3"], p3["b3"])
        proj2d = Projector(p2["w1"], p2["b1"], p2["w2"], p2["b2"], p2["w3"], p2["b3"])
        fz = grab("fuse.")
        fuse = FuseLayer(fz["w"], fz["b"]) if fz else None
        ident = grab("identifiers.")
        table = IdentifierTable(
            config.identifier_mode, ident.get("embeddings") if ident else None
        )
        return cls(vocab, config, params, proj3d, proj2d, fuse, table)

    def astype(self, dtype) -> "GroundedLM":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return GroundedLM(
            self.vocab,
            self.config,
            params,
            self.proj3d.astype(dtype),
            self.proj2d.astype(dtype),
            None if self.fuse is None else self.fuse.astype(dtype),
            self.table.astype(dtype),
        )

    # -- embedding -----------------------------------------------------------

    def unembed_matrix(self) -> np.ndarray:
        if self.config.fusion == FUSION_PLAIN:
            return self.params["embed"]
        return np.vstack([self.params["embed"], self.table.embeddings])

    def embed_token(self, token_id: int) -> np.ndarray:
        base = self.vocab.base_size
        if token_id < base:
            return self.params["embed"][token_id]
        if self.config.fusion == FUSION_PLAIN:
            raise ConfigError("identifier token reached plain-text embedding path")
        return self.table.embeddings[token_id - base]


def prepare_instance(model: GroundedLM, example: TrainingExample) -> EmbeddedInstance:
    """Assemble the scene region with the model's own components, then splice."""
    seq, cache = build_scene_sequence(
        example.scene,
        example.features,
        model.table,
        model.config.fusion,
        proj3d=model.proj3d,
        proj2d=model.proj2d,
        fuse=model.fuse,
        vocab=model.vocab,
        text_rows=model.params["embed"],
        dtype=model.dtype,
    )
    inst = embed_instance(model, example.qa, seq)
    inst.scene_cache = cache
    return inst


def embed_instance(model: GroundedLM, qa: QAInstance, scene_seq: SceneSequence) -> EmbeddedInstance:
    vocab = model.vocab
    plain = model.config.fusion == FUSION_PLAIN
    sys_ids = vocab.tokenize(qa.system, plaintext_identifiers=plain)
    (lb,) = vocab.tokenize("[")
    (rb,) = vocab.tokenize("]")
    try:
        i0 = sys_ids.index(lb)
        i1 = sys_ids.index(rb)
    except ValueError as exc:
        raise ConfigError("system message lacks a bracketed object region") from exc
    if i1 <= i0:
        raise ConfigError("system message brackets are out of order")

    chat_ids = vocab.tokenize(f" USER: {qa.user} ASSISTANT: ", plaintext_identifiers=plain)
    if qa.target:
        response_ids = vocab.tokenize(qa.target, plaintext_identifiers=plain) + [vocab.eos_id]
    else:
        response_ids = []

    token_ids: list[int] = [vocab.bos_id]
    token_ids.extend(sys_ids[:i0])
    scene_start = len(token_ids)
    region_ids = [
        tok if slot[0] == "text" else -1 for slot in scene_seq.slots for tok in (slot[1],)
    ]
    token_ids.extend(region_ids)
    token_ids.extend(sys_ids[i1 + 1 :])
    token_ids.extend(chat_ids)
    response_start = len(token_ids)
    token_ids.extend(response_ids)

    T = len(token_ids)
    if T > model.config.n_ctx:
        raise ConfigError(
            f"context overflow: instance needs {T} tokens, context is {model.config.n_ctx}"
        )

    d = model.config.d_model
    rows = np.empty((T, d), dtype=model.dtype)
    for t, tok in enumerate(token_ids):
        if scene_start <= t < scene_start + scene_seq.length:
            rows[t] = scene_seq.embeddings[t - scene_start]
        else:
            rows[t] = model.embed_token(tok)

    mask = np.zeros(T, dtype=bool)
    mask[response_start:] = True
    ids = np.array(token_ids, dtype=np.int64)
    return EmbeddedInstance(
        embeddings=rows,
        token_ids=ids,
        loss_mask=mask,
        scene_start=scene_start,
        scene_seq=scene_seq,
    )


# -- transformer forward/backward -------------------------------------------


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + 1e-5)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _split_heads(x, n_heads):
    T, d = x.shape
    return x.reshape(T, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, T, dh = x.shape
    return x.transpose(1, 0, 2).reshape(T, h * dh)


def _causal_bias(T, dtype):
    bias = np.zeros((T, T), dtype=dtype)
    bias[np.triu_indices(T, k=1)] = _NEG
    return bias


def _softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_hidden(model: GroundedLM, x0: np.ndarray, want_cache: bool):
    cfg = model.config
    p = model.params
    T = x0.shape[0]
    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    bias = _causal_bias(T, x0.dtype)
    x = x0
    caches = []
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        a, ln1_cache = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = _split_heads(a @ p[pre + "attn.wq"], cfg.n_heads)
        k = _split_heads(a @ p[pre + "attn.wk"], cfg.n_heads)
        v = _split_heads(a @ p[pre + "attn.wv"], cfg.n_heads)
        scores = np.matmul(q, k.transpose(0, 2, 1)) * scale + bias
        probs = _softmax(scores)
        ctx = _merge_heads(np.matmul(probs, v))
        attn_out = ctx @ p[pre + "attn.wo"]
        x_mid = x + attn_out
        b, ln2_cache = _layer_norm(x_mid, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u_pre = b @ p[pre + "mlp.w_up"] + p[pre + "mlp.b_up"]
        u = gelu(u_pre)
        mlp_out = u @ p[pre + "mlp.w_down"] + p[pre + "mlp.b_down"]
        x_out = x_mid + mlp_out
        if want_cache:
            caches.append(
                {
                    "x": x, "a": a, "ln1": ln1_cache, "q": q, "k": k, "v": v,
                    "probs": probs, "ctx": ctx, "x_mid": x_mid, "b": b,
                    "ln2": ln2_cache, "u_pre": u_pre, "u": u,
                }
            )
        x = x_out
    f, lnf_cache = _layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    if want_cache:
        return f, {"layers": caches, "ln_f": lnf_cache, "x_last": x}
    return f, None


def _backward_hidden(model: GroundedLM, df: np.ndarray, cache, grads) -> np.ndarray:
    cfg = model.config
    p = model.params
    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    dx, dg, db = _layer_norm_backward(df, cache["ln_f"], p["ln_f.g"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db
    for i in reversed(range(cfg.n_layers)):
        pre = f"l{i}."
        c = cache["layers"][i]
        # mlp branch
        du = dx @ p[pre + "mlp.w_down"].T
        grads[pre + "mlp.w_down"] += c["u"].T @ dx
        grads[pre + "mlp.b_down"] += dx.sum(axis=0)
        du_pre = du * gelu_grad(c["u_pre"])
        grads[pre + "mlp.w_up"] += c["b"].T @ du_pre
        grads[pre + "mlp.b_up"] += du_pre.sum(axis=0)
        db_in = du_pre @ p[pre + "mlp.w_up"].T
        dxm, dg, dbb = _layer_norm_backward(db_in, c["ln2"], p[pre + "ln2.g"])
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += dbb
        dx_mid = dx + dxm
        # attention branch
        dctx = dx_mid @ p[pre + "attn.wo"].T
        grads[pre + "attn.wo"] += c["ctx"].T @ dx_mid
        dctx_h = _split_heads(dctx, cfg.n_heads)
        dprobs = np.matmul(dctx_h, c["v"].transpose(0, 2, 1))
        dv = np.matmul(c["probs"].transpose(0, 2, 1), dctx_h)
        inner = (dprobs * c["probs"]).sum(axis=-1, keepdims=True)
        dscores = (dprobs - inner) * c["probs"]
        dq = np.matmul(dscores, c["k"]) * scale
        dk = np.matmul(dscores.transpose(0, 2, 1), c["q"]) * scale
        da = (
            _merge_heads(dq) @ p[pre + "attn.wq"].T
            + _merge_heads(dk) @ p[pre + "attn.wk"].T
            + _merge_heads(dv) @ p[pre + "attn.wv"].T
        )
        grads[pre + "attn.wq"] += c["a"].T @ _merge_heads(dq)
        grads[pre + "attn.wk"] += c["a"].T @ _merge_heads(dk)
        grads[pre + "attn.wv"] += c["a"].T @ _merge_heads(dv)
        dxl, dg, dbb = _layer_norm_backward(da, c["ln1"], p[pre + "ln1.g"])
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += dbb
        dx = dx_mid + dxl
    return dx


# -- loss --------------------------------------------------------------------


def _instance_logit_rows(model, inst, want_cache):
    x0 = inst.embeddings + model.params["pos"][: inst.length]
    f, cache = _forward_hidden(model, x0, want_cache)
    response = np.flatnonzero(inst.loss_mask)
    predict_at = response - 1
    return f, cache, predict_at, response


def _masked_ce(model, inst, unembed):
    """Per-instance loss sum (f64) and count; plus softmax residuals."""
    f, cache, predict_at, response = _instance_logit_rows(model, inst, want_cache=True)
    gold = inst.token_ids[response]
    fp = f[predict_at]
    logits = (fp @ unembed.T).astype(np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=1))
    loss_sum = float((lse - logits[np.arange(len(gold)), gold]).sum())
    soft = np.exp(logits - lse[:, None])
    soft[np.arange(len(gold)), gold] -= 1.0
    return loss_sum, len(gold), f, cache, predict_at, soft, fp


def loss(model: GroundedLM, batch) -> float:
    """Mean masked cross-entropy; canonical reduction order over the batch."""
    unembed = model.unembed_matrix()
    parts = []
    count = 0
    for inst in batch:
        f, _, predict_at, response = _instance_logit_rows(model, inst, want_cache=False)
        if len(response) == 0:
            continue
        gold = inst.token_ids[response]
        logits = (f[predict_at] @ unembed.T).astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits).sum(axis=1))
        parts.append(float((lse - logits[np.arange(len(gold)), gold]).sum()))
        count += len(gold)
    if count == 0:
        raise ValueError("loss needs at least one masked response position")
    return math.fsum(sorted(parts)) / count


def _scene_backward(model, inst, d_region, grads, emb_ids, emb_rows):
    seq = inst.scene_seq
    cache = inst.scene_cache
    d = model.config.d_model
    dfp = np.zeros_like(cache.fp)
    dfv = np.zeros_like(cache.fv)
    dfused = None if cache.fused is None else np.zeros_like(cache.fused)
    for pos, slot in enumerate(seq.slots):
        row = d_region[pos]
        kind, ref = slot
        if kind == "text":
            emb_ids.append(ref)
            emb_rows.append(row)
        elif kind == "identifier":
            if model.table.trainable:
                grads["identifiers.embeddings"][ref - 1] += row
        elif kind == "obj3d":
            dfp[ref - 1] += row
        elif kind == "obj2d":
            dfv[ref - 1] += row
        elif kind == "fused":
            dfused[ref - 1] += row
    if dfused is not None:
        dfp2, dfv2, fgrads = model.fuse.backward(cache.fuse_cache, dfused)
        dfp += dfp2
        dfv += dfv2
        for name, g in fgrads.items():
            grads[f"fuse.{name}"] += g
    _, g3 = model.proj3d.backward(cache.cache3d, dfp)
    for name, g in g3.items():
        grads[f"proj3d.{name}"] += g
    _, g2 = model.proj2d.backward(cache.cache2d, dfv)
    for name, g in g2.items():
        grads[f"proj2d.{name}"] += g


def loss_and_grads(model: GroundedLM, batch):
    """(mean loss, gradient dict over trainable parameter names)."""
    unembed = model.unembed_matrix()
    base = model.vocab.base_size
    plain = model.config.fusion == FUSION_PLAIN
    trainable = model.trainable_names()
    named = model.named_parameters()
    grads = {name: np.zeros_like(named[name]) for name in named}

    per_instance = []
    parts = []
    count = 0
    for inst in batch:
        if inst.scene_cache is None:
            raise ValueError("training instances must come from prepare_instance")
        loss_sum, n, f, cache, predict_at, soft, fp = _masked_ce(model, inst, unembed)
        if n:
            parts.append(loss_sum)
        count += n
        per_instance.append((inst, f, cache, predict_at, soft, fp))
    if count == 0:
        raise ValueError("loss needs at least one masked response position")

    dunembed = np.zeros_like(unembed)
    inv = 1.0 / count
    for inst, f, cache, predict_at, soft, fp in per_instance:
        if len(predict_at) == 0:
            continue
        dlogits = (soft * inv).astype(model.dtype)
        dunembed += dlogits.T @ fp
        df_rows = dlogits @ unembed
        df = np.zeros_like(f)
        df[predict_at] = df_rows
        dx0 = _backward_hidden(model, df, cache, grads)
        grads["pos"][: inst.length] += dx0
        # route embedding rows back to their sources
        emb_ids: list[int] = []
        emb_rows: list[np.ndarray] = []
        s0 = inst.scene_start
        s1 = s0 + inst.scene_seq.length
        for t, tok in enumerate(inst.token_ids):
            if s0 <= t < s1:
                continue
            tok = int(tok)
            if tok < base:
                emb_ids.append(tok)
                emb_rows.append(dx0[t])
            elif not plain and model.table.trainable:
                grads["identifiers.embeddings"][tok - base] += dx0[t]
        _scene_backward(model, inst, dx0[s0:s1], grads, emb_ids, emb_rows)
        if emb_ids:
            np.add.at(grads["embed"], np.array(emb_ids), np.stack(emb_rows))

    # tied unembedding: fold logit gradients into the same tables
    grads["embed"] += dunembed[:base]
    if not plain and model.table.trainable:
        grads["identifiers.embeddings"] += dunembed[base:]

    grads = {k: v for k, v in grads.items() if k in trainable}
    return math.fsum(sorted(parts)) / count, grads


# -- gradient check ----------------------------------------------------------


def gradient_check_model(model: GroundedLM, batch, eps: float = 1e-5, floor: float = 1e-6):
    """Compare analytic gradients with central differences, in float64.

    Relative error is |numeric - analytic| / max(|numeric|, |analytic|,
    floor). The floor marks the resolution of the measurement itself: a
    central difference of a float64 loss of size L carries cancellation
    noise near ulp(L)/(2*eps) ~ 1e-10 here, so magnitudes under the floor
    are compared absolutely at tolerance*floor rather than pretending the
    estimator has relative accuracy it cannot deliver.

    Returns (worst relative error, fraction of parameters within 1e-4).
    """
    model64 = model.astype(np.float64)
    examples = batch
    prepared = [prepare_instance(model64, ex) for ex in examples]
    _, grads = loss_and_grads(model64, prepared)
    named = model64.named_parameters()
    total = 0
    within = 0
    worst = 0.0
    for name in sorted(grads):
        arr = named[name]
        g = grads[name]
        # arr.flat writes through for any memory layout; reshape(-1) would
        # silently return a detached copy for non-C-contiguous tensors
        flat = arr.flat
        gflat = np.ravel(g)
        for idx in range(arr.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = loss(model64, [prepare_instance(model64, ex) for ex in examples])
            flat[idx] = orig - eps
            down = loss(model64, [prepare_instance(model64, ex) for ex in examples])
            flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(numeric), abs(gflat[idx]), floor)
            rel = abs(numeric - gflat[idx]) / denom
            total += 1
            if rel <= 1e-4:
                within += 1
            if rel > worst:
                worst = rel
    return worst, within / total


# -- optimiser ---------------------------------------------------------------


def lr_at_step(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup into cosine annealing to zero."""
    if total_steps <= 0:
        return 0.0
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.base_lr * (step + 1) / cfg.warmup_steps
    span = max(total_steps - cfg.warmup_steps, 1)
    progress = min((step - cfg.warmup_steps) / span, 1.0)
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * progress))


def _global_norm(grads) -> float:
    total = 0.0
    for g in grads.values():
        gf = np.asarray(g, dtype=np.float64)
        total += float((gf * gf).sum())
    return math.sqrt(total)


def train(model: GroundedLM, examples, cfg: TrainConfig, log_path=None):
    """Joint training of LM, projectors, fuse layer, and learnable rows.

    Returns the loss curve as a list of (step, lr, loss) rows; writes the
    same rows as CSV to log_path when given. Raises NumericError with the
    step index if the loss stops being finite.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("training needs a non-empty dataset")
    named = model.named_parameters()
    trainable = model.trainable_names()
    adam_m = {k: np.zeros_like(named[k]) for k in trainable}
    adam_v = {k: np.zeros_like(named[k]) for k in trainable}

    order_rng = derive_rng("train-order", cfg.seed)
    n = len(examples)
    batches_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = batches_per_epoch * cfg.epochs
    rows = []
    step = 0
    for _epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        for b in range(batches_per_epoch):
            chosen = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = [prepare_instance(model, examples[i]) for i in chosen]
            value, grads = loss_and_grads(model, batch)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}", step=step)
            norm = _global_norm(grads)
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                for g in grads.values():
                    g *= scale
            lr = lr_at_step(cfg, step, total_steps)
            step_t = step + 1
            c1 = 1.0 - cfg.beta1**step_t
            c2 = 1.0 - cfg.beta2**step_t
            for name, g in grads.items():
                m = adam_m[name]
                v = adam_v[name]
                m += (1.0 - cfg.beta1) * (g - m)
                v += (1.0 - cfg.beta2) * (g * g - v)
                update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
                arr = named[name]
                arr -= (lr * update).astype(arr.dtype)
            rows.append((step, lr, value))
            step += 1
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "lr", "loss"])
            writer.writerows(rows)
    return rows


# -- generation --------------------------------------------------------------


def _prefix_instance(model: GroundedLM, qa: QAInstance, scene_seq: SceneSequence):
    prompt = replace(qa, target="")
    return embed_instance(model, prompt, scene_seq)


def generate(model: GroundedLM, inst: EmbeddedInstance, max_len: int) -> list[int]:
    """Greedy decoding with a per-layer KV cache; stops at eos or max_len."""
    if max_len <= 0:
        return []
    cfg = model.config
    p = model.params
    unembed = model.unembed_matrix()
    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)

    x0 = inst.embeddings + p["pos"][: inst.length]
    T = inst.length
    bias = _causal_bias(T, x0.dtype)
    ks, vs = [], []
    x = x0
    for i in range(cfg.n_layers):
        pre = f"l{i}."
        a, _ = _layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = _split_heads(a @ p[pre + "attn.wq"], cfg.n_heads)
        k = _split_heads(a @ p[pre + "attn.wk"], cfg.n_heads)
        v = _split_heads(a @ p[pre + "attn.wv"], cfg.n_heads)
        probs = _softmax(np.matmul(q, k.transpose(0, 2, 1)) * scale + bias)
        x_mid = x + _merge_heads(np.matmul(probs, v)) @ p[pre + "attn.wo"]
        b, _ = _layer_norm(x_mid, p[pre + "ln2.g"], p[pre + "ln2.b"])
        u = gelu(b @ p[pre + "mlp.w_up"] + p[pre + "mlp.b_up"])
        x = x_mid + u @ p[pre + "mlp.w_down"] + p[pre + "mlp.b_down"]
        ks.append(k)
        vs.append(v)

    out: list[int] = []
    pos_at = T
    f, _ = _layer_norm(x[-1:], p["ln_f.g"], p["ln_f.b"])
    next_id = int(np.argmax(f[0] @ unembed.T))
    while True:
        if next_id == model.vocab.eos_id:
            break
        out.append(next_id)
        if len(out) >= max_len:
            break
        if pos_at >= cfg.n_ctx:
            break
        xr = (model.embed_token(next_id) + p["pos"][pos_at])[None, :]
        pos_at += 1
        for i in range(cfg.n_layers):
            pre = f"l{i}."
            a, _ = _layer_norm(xr, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = _split_heads(a @ p[pre + "attn.wq"], cfg.n_heads)
            k_new = _split_heads(a @ p[pre + "attn.wk"], cfg.n_heads)
            v_new = _split_heads(a @ p[pre + "attn.wv"], cfg.n_heads)
            ks[i] = np.concatenate([ks[i], k_new], axis=1)
            vs[i] = np.concatenate([vs[i], v_new], axis=1)
            probs = _softmax(np.matmul(q, ks[i].transpose(0, 2, 1)) * scale)
            x_mid = xr + _merge_heads(np.matmul(probs, vs[i])) @ p[pre + "attn.wo"]
            b, _ = _layer_norm(x_mid, p[pre + "ln2.g"], p[pre + "ln2.b"])
            u = gelu(b @ p[pre + "mlp.w_up"] + p[pre + "mlp.b_up"])
            xr = x_mid + u @ p[pre + "mlp.w_down"] + p[pre + "mlp.b_down"]
        f, _ = _layer_norm(xr, p["ln_f.g"], p["ln_f.b"])
        next_id = int(np.argmax(f[0] @ unembed.T))
    return out


def respond(model: GroundedLM, example: TrainingExample, max_len: int = 48) -> str:
    """Generate the response text for one instance (target ignored)."""
    seq, _ = build_scene_sequence(
        example.scene,
        example.features,
        model.table,
        model.config.fusion,
        proj3d=model.proj3d,
        proj2d=model.proj2d,
        fuse=model.fuse,
        vocab=model.vocab,
        text_rows=model.params["embed"],
        dtype=model.dtype,
    )
    inst = _prefix_instance(model, example.qa, seq)
    ids = generate(model, inst, max_len)
    plain = model.config.fusion == FUSION_PLAIN
    return model.vocab.detokenize(ids, plaintext_identifiers=plain)
