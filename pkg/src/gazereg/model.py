"""The differentiable predictor: patch embedding, gaze-regularized attention,
KL regularizer, pooling with time embeddings, and an autoregressive token
decoder.  All gradients are computed manually and validated against central
finite differences.

Parameter layout (float64 throughout; checkpoints quantize to float32):

* ``embed_rgb.w/.b``       patch embedding for key/value features
* ``embed_gaze.w/.b``      patch embedding for query images (gaze models)
* ``block{i}.wq/.wk/.wv/.wo``  attention projections per block
* ``time_emb``             additive per-frame-position vectors
* ``gaze_text.emb``        quantized-gaze token table (gaze-text baseline)
* ``pool.w/.b``            context projection over concatenated frame vectors
* ``dec.*``                recurrent token decoder over the small vocabulary
* ``pseudo.*``             heatmap predictor (pseudo query mode)
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import pseudo
from .config import RunConfig
from .errors import HashMismatchError, NumericError, ParseError, ShapeError
from .heatmap import HIGHLIGHT_CHANNEL
from .patches import PatchGrid

BOS_OFFSET = 0  # BOS id == vocab_size (one extra embedding row)


# ---------------------------------------------------------------------------
# small math helpers


def softmax_rows(scores):
    """Row-wise stable softmax along the last axis."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(a, da):
    """Backward through row softmax: dS = A * (dA - sum(dA * A))."""
    inner = (da * a).sum(axis=-1, keepdims=True)
    return a * (da - inner)


_POS_CACHE = {}


def _sinusoid_table(n, d):
    pos = np.arange(n)[:, None].astype(np.float64)
    div = np.exp(np.arange(0, d, 2) * (-math.log(100.0) / d))
    table = np.zeros((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * div)
    table[:, 1::2] = np.cos(pos * div[: table[:, 1::2].shape[1]])
    return table


def positional_encoding(grid, d):
    """Fixed 2-D sinusoidal table: half the dims encode the patch row, half
    the column, so both coordinates are directly readable."""
    key = (grid.n_h, grid.n_v, d)
    if key not in _POS_CACHE:
        d_half = d // 2
        rows = _sinusoid_table(grid.n_v, d_half)
        cols = _sinusoid_table(grid.n_h, d - d_half)
        table = np.zeros((grid.n, d), dtype=np.float64)
        for j in range(grid.n):
            r, c = divmod(j, grid.n_h)
            table[j, :d_half] = rows[r]
            table[j, d_half:] = cols[c]
        _POS_CACHE[key] = table
    return _POS_CACHE[key]


def patchify(image, grid):
    """(h, w, c) image -> (N, patch_h*patch_w*c) rows, patch row-major."""
    h, w, c = image.shape
    if h != grid.n_v * grid.patch_h or w != grid.n_h * grid.patch_w:
        raise ShapeError(f"image {w}x{h} does not match grid {grid}")
    x = image.reshape(grid.n_v, grid.patch_h, grid.n_h, grid.patch_w, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(grid.n, -1)


def unpatchify(flat, grid, channels):
    x = flat.reshape(grid.n_v, grid.n_h, grid.patch_h, grid.patch_w, channels)
    return x.transpose(0, 2, 1, 3, 4).reshape(
        grid.n_v * grid.patch_h, grid.n_h * grid.patch_w, channels
    )


# ---------------------------------------------------------------------------
# public data types


@dataclass
class FeatureMap:
    tokens: np.ndarray  # (N, D)
    source: str  # rgb | gaze_overlaid | pseudo_overlaid


@dataclass
class AttentionOutput:
    values_out: np.ndarray  # (N_q, D)
    attn_weights: np.ndarray  # (heads, N_q, N_k), row-stochastic
    attn_distribution: np.ndarray  # (N_k,), mean over heads and query rows


@dataclass
class LossBreakdown:
    ce: float
    kl: float
    cosine: float
    lambda_: float
    total: float

    @classmethod
    def compose(cls, ce, kl, cosine, lambda_):
        # summation order is part of the contract: total = ce + lambda*kl + cosine
        return cls(ce=ce, kl=kl, cosine=cosine, lambda_=lambda_,
                   total=ce + lambda_ * kl + cosine)

    def to_dict(self):
        return {"ce": self.ce, "kl": self.kl, "cosine": self.cosine,
                "lambda": self.lambda_, "total": self.total}


@dataclass
class SampleInputs:
    frames: np.ndarray  # (tau_o, h, w, c) rgb
    targets: np.ndarray  # (T,) token ids
    queries: np.ndarray = None  # (tau_o, h, w, c) query images, or None
    gaze_dists: np.ndarray = None  # (tau_o, N) KL targets, or None
    gaze_tokens: np.ndarray = None  # (tau_o,) patch ids for gaze-text, or None
    true_overlays: np.ndarray = None  # (tau_o, h, w, c) cosine targets, or None


@dataclass
class ModelState:
    cfg: RunConfig
    params: dict
    buffers: dict = field(default_factory=dict)  # frozen (non-trainable) tensors

    def grid(self):
        return PatchGrid(
            n_h=self.cfg.n_h, n_v=self.cfg.n_v,
            patch_w=self.cfg.patch_px, patch_h=self.cfg.patch_px,
        )


def uses_gaze_block(cfg):
    return cfg.model != "base" and cfg.query_mode != "gaze-text"


def uses_pseudo(cfg):
    return cfg.query_mode == "pseudo" or cfg.pseudo_cotrain


def init_state(cfg):
    """Seeded parameter initialization; creation order is fixed."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_model
    p_dim = cfg.patch_px * cfg.patch_px * cfg.channels
    params = {}

    def dense(shape, scale):
        return rng.normal(0.0, scale, size=shape)

    params["embed_rgb.w"] = dense((p_dim, d), 1.0 / math.sqrt(p_dim))
    params["embed_rgb.b"] = np.zeros(d)
    if uses_gaze_block(cfg):
        params["embed_gaze.w"] = dense((p_dim, d), 1.0 / math.sqrt(p_dim))
        params["embed_gaze.b"] = np.zeros(d)
        for i in range(cfg.n_blocks):
            params[f"block{i}.wq"] = dense((d, d), 0.5 / math.sqrt(d))
            params[f"block{i}.wk"] = dense((d, d), 0.5 / math.sqrt(d))
            params[f"block{i}.wv"] = dense((d, d), 1.0 / math.sqrt(d))
            params[f"block{i}.wo"] = dense((d, d), 1.0 / math.sqrt(d))
    params["time_emb"] = dense((cfg.tau_o, d), 0.3)
    if cfg.query_mode == "gaze-text":
        # one row per patch plus an "empty window" row
        params["gaze_text.emb"] = dense((cfg.n_patches + 1, d), 0.5)

    ctx_in = cfg.tau_o * d * (2 if cfg.query_mode == "gaze-text" else 1)
    params["pool.w"] = dense((cfg.d_ctx, ctx_in), 1.0 / math.sqrt(ctx_in))
    params["pool.b"] = np.zeros(cfg.d_ctx)

    dh = cfg.d_hidden
    params["dec.emb"] = dense((cfg.vocab_size + 1, d), 0.5)
    params["dec.wh"] = dense((dh, dh), 1.0 / math.sqrt(dh))
    params["dec.we"] = dense((dh, d), 1.0 / math.sqrt(d))
    params["dec.wc"] = dense((dh, cfg.d_ctx), 1.0 / math.sqrt(cfg.d_ctx))
    params["dec.bh"] = np.zeros(dh)
    params["dec.wout"] = dense((cfg.vocab_size, dh), 1.0 / math.sqrt(dh))
    params["dec.bout"] = np.zeros(cfg.vocab_size)

    if uses_pseudo(cfg):
        for name, arr in pseudo.init_params(rng, cfg.channels, cfg.pseudo_widths).items():
            params[f"pseudo.{name}"] = arr

    buffers = {
        "frozen.embed.w": params["embed_rgb.w"].copy(),
        "frozen.embed.b": params["embed_rgb.b"].copy(),
    }
    return ModelState(cfg=cfg, params=params, buffers=buffers)


# ---------------------------------------------------------------------------
# public ops


def embed_patches(image, grid, w, b, add_positions=True):
    """Flatten patches, project linearly, add fixed sinusoidal positions."""
    flat = patchify(np.asarray(image, dtype=np.float64), grid)
    tokens = flat @ w + b
    if add_positions:
        tokens = tokens + positional_encoding(grid, w.shape[1])
    return tokens


def gaze_attention_block(q_feat, kv_feat, params, heads=1):
    """Scaled dot-product attention with gaze-based queries.

    ``params`` maps wq/wk/wv/wo to (D, D) matrices.
    """
    q = np.asarray(q_feat.tokens, dtype=np.float64)
    kv = np.asarray(kv_feat.tokens, dtype=np.float64)
    for name, t in (("q_feat.tokens", q), ("kv_feat.tokens", kv)):
        if not np.isfinite(t).all():
            raise NumericError(f"non-finite values in {name}")
    if q.shape[1] != kv.shape[1]:
        raise ShapeError("query and key/value token widths differ")
    out, a, dist, _ = _attn_forward(q, kv, params, heads)
    return AttentionOutput(values_out=out, attn_weights=a, attn_distribution=dist)


def kl_regularizer(attn_distribution, gaze, eps=1e-8):
    """D_KL(A || H') with H' the eps-smoothed, renormalized gaze distribution.

    ``gaze`` may be a GazeDistribution or a plain probability vector.
    Zero attention entries contribute zero.
    """
    a = np.asarray(getattr(attn_distribution, "probs", attn_distribution), dtype=np.float64)
    h = np.asarray(getattr(gaze, "probs", gaze), dtype=np.float64)
    if a.shape != h.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {h.shape}")
    hp = h + eps
    hp = hp / hp.sum()
    mask = a > 0
    return float(np.sum(a[mask] * np.log(a[mask] / hp[mask])))


# ---------------------------------------------------------------------------
# forward


def _attn_forward(q_tokens, kv_tokens, params, heads):
    n_q, d = q_tokens.shape
    n_k = kv_tokens.shape[0]
    dh = d // heads
    q = q_tokens @ params["wq"]
    k = kv_tokens @ params["wk"]
    v = kv_tokens @ params["wv"]
    qh = q.reshape(n_q, heads, dh).transpose(1, 0, 2)
    kh = k.reshape(n_k, heads, dh).transpose(1, 0, 2)
    vh = v.reshape(n_k, heads, dh).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(dh)
    a = softmax_rows(scores)
    z = a @ vh
    zc = z.transpose(1, 0, 2).reshape(n_q, d)
    out = zc @ params["wo"]
    dist = a.mean(axis=(0, 1))
    cache = {"q_tokens": q_tokens, "kv_tokens": kv_tokens, "qh": qh, "kh": kh,
             "vh": vh, "a": a, "zc": zc, "heads": heads, "dh": dh}
    return out, a, dist, cache


def _attn_backward(dout, cache, params):
    q_tokens = cache["q_tokens"]
    kv_tokens = cache["kv_tokens"]
    a, qh, kh, vh = cache["a"], cache["qh"], cache["kh"], cache["vh"]
    heads, dh = cache["heads"], cache["dh"]
    n_q, d = q_tokens.shape
    n_k = kv_tokens.shape[0]

    dwo = cache["zc"].T @ dout
    dzc = dout @ params["wo"].T
    dz = dzc.reshape(n_q, heads, dh).transpose(1, 0, 2)
    da = dz @ vh.transpose(0, 2, 1)
    dvh = a.transpose(0, 2, 1) @ dz
    da_extra = cache.get("d_dist")
    if da_extra is not None:
        # gradient arriving through attn_distribution = mean over heads, rows
        da = da + da_extra[None, None, :] / (heads * n_q)
    ds = softmax_rows_backward(a, da) / math.sqrt(dh)
    dqh = ds @ kh
    dkh = ds.transpose(0, 2, 1) @ qh
    dq = dqh.transpose(1, 0, 2).reshape(n_q, d)
    dk = dkh.transpose(1, 0, 2).reshape(n_k, d)
    dv = dvh.transpose(1, 0, 2).reshape(n_k, d)

    grads = {
        "wq": q_tokens.T @ dq,
        "wk": kv_tokens.T @ dk,
        "wv": kv_tokens.T @ dv,
        "wo": dwo,
    }
    dq_tokens = dq @ params["wq"].T
    dkv_tokens = dk @ params["wk"].T + dv @ params["wv"].T
    return dq_tokens, dkv_tokens, grads


def _blend_forward(frame, heat, alpha):
    """Smooth overlay blend for the pseudo query path.

    The predicted heatmap is already squashed to [0, 1], so unlike
    heatmap.overlay no maximum renormalization is applied; this keeps the
    training loss differentiable everywhere.
    """
    highlight = np.zeros(frame.shape[2])
    highlight[HIGHLIGHT_CHANNEL] = 1.0
    weight = (alpha * heat)[:, :, None]
    out = (1.0 - weight) * frame + weight * highlight
    cache = {"frame": frame, "alpha": alpha, "highlight": highlight}
    return out, cache


def _blend_backward(dout, cache):
    frame, alpha, highlight = cache["frame"], cache["alpha"], cache["highlight"]
    return (dout * (highlight[None, None, :] - frame)).sum(axis=2) * alpha


def _block_params(params, i):
    return {k: params[f"block{i}.{k}"] for k in ("wq", "wk", "wv", "wo")}


def _smoothed_target(h, eps):
    hp = h + eps
    return hp / hp.sum()


def forward_sample(state, s, train=True):
    """Forward pass for one sample; returns (parts, cache).

    ``parts`` holds raw ce / kl / cosine (before the lambda weighting).
    """
    cfg = state.cfg
    params = state.params
    grid = state.grid()
    heads = cfg.heads
    pos = positional_encoding(grid, cfg.d_model)

    frames = np.asarray(s.frames, dtype=np.float64)
    if not np.isfinite(frames).all():
        raise NumericError("non-finite values in frames")

    cache = {"frames": frames, "blocks": [], "pseudo": [], "blend": [],
             "query_flat": [], "kv_flat": [], "kl": []}

    kv_tokens = []
    for f in range(cfg.tau_o):
        flat = patchify(frames[f], grid)
        cache["kv_flat"].append(flat)
        kv_tokens.append(flat @ params["embed_rgb.w"] + params["embed_rgb.b"] + pos)

    kl_terms = []
    cosine_terms = []
    dpred_embs = []
    tokens_out = []

    if uses_gaze_block(cfg):
        query_images = []
        for f in range(cfg.tau_o):
            if cfg.query_mode == "pseudo":
                heat, pcache = pseudo.forward(
                    {k[len("pseudo."):]: v for k, v in params.items()
                     if k.startswith("pseudo.")},
                    frames[f],
                )
                qimg, bcache = _blend_forward(frames[f], heat, cfg.overlay_alpha)
                cache["pseudo"].append(pcache)
                cache["blend"].append(bcache)
            else:
                if s.queries is None:
                    raise ShapeError("query images required for this query mode")
                qimg = np.asarray(s.queries[f], dtype=np.float64)
                if not np.isfinite(qimg).all():
                    raise NumericError("non-finite values in queries")
            query_images.append(qimg)
        cache["query_images"] = query_images

        for f in range(cfg.tau_o):
            flat = patchify(query_images[f], grid)
            cache["query_flat"].append(flat)
            q = flat @ params["embed_gaze.w"] + params["embed_gaze.b"] + pos
            frame_blocks = []
            for i in range(cfg.n_blocks):
                out, a, dist, bc = _attn_forward(q, kv_tokens[f], _block_params(params, i), heads)
                if s.gaze_dists is not None:
                    hp = _smoothed_target(np.asarray(s.gaze_dists[f], dtype=np.float64), cfg.kl_eps)
                    mask = dist > 0
                    kl_terms.append(float(np.sum(dist[mask] * np.log(dist[mask] / hp[mask]))))
                    bc["hp"] = hp
                frame_blocks.append(bc)
                q = out
            cache["blocks"].append(frame_blocks)
            tokens_out.append(q)
    else:
        tokens_out = kv_tokens

    # cosine supervision for the pseudo path
    if uses_pseudo(cfg) and s.true_overlays is not None:
        fw = state.buffers["frozen.embed.w"]
        fb = state.buffers["frozen.embed.b"]
        if cfg.query_mode == "pseudo":
            pred_imgs = cache["query_images"]
        else:
            # co-training: predict heatmaps on the side, queries untouched
            cache["cotrain"] = []
            pred_imgs = []
            for f in range(cfg.tau_o):
                heat, pcache = pseudo.forward(
                    {k[len("pseudo."):]: v for k, v in params.items()
                     if k.startswith("pseudo.")},
                    frames[f],
                )
                qimg, bcache = _blend_forward(frames[f], heat, cfg.overlay_alpha)
                cache["cotrain"].append((pcache, bcache))
                pred_imgs.append(qimg)
        cache["cosine_flat"] = []
        for f in range(cfg.tau_o):
            pred_flat = patchify(pred_imgs[f], grid)
            true_flat = patchify(np.asarray(s.true_overlays[f], dtype=np.float64), grid)
            e_pred = (pred_flat @ fw + fb).mean(axis=0)
            e_true = (true_flat @ fw + fb).mean(axis=0)
            loss_f, dpred = pseudo.cosine_loss(e_pred, e_true)
            cosine_terms.append(loss_f)
            dpred_embs.append(dpred)
            cache["cosine_flat"].append(pred_flat)
        cache["dpred_embs"] = dpred_embs

    # pool with additive time embeddings, then project
    frame_vecs = []
    for f in range(cfg.tau_o):
        frame_vecs.append(tokens_out[f].mean(axis=0) + params["time_emb"][f])
    pieces = list(frame_vecs)
    if cfg.query_mode == "gaze-text":
        if s.gaze_tokens is None:
            raise ShapeError("gaze-text mode requires gaze_tokens")
        for f in range(cfg.tau_o):
            pieces.append(params["gaze_text.emb"][int(s.gaze_tokens[f])])
    ctx_in = np.concatenate(pieces)
    ctx_pre = params["pool.w"] @ ctx_in + params["pool.b"]
    context = np.tanh(ctx_pre)
    cache.update(tokens_out=tokens_out, ctx_in=ctx_in, context=context)

    # teacher-forced decoder
    targets = np.asarray(s.targets, dtype=np.int64)
    t_out = len(targets)
    h_seq = [np.zeros(cfg.d_hidden)]
    prev_ids = []
    probs_seq = []
    ce_sum = 0.0
    for t in range(t_out):
        prev = cfg.vocab_size if t == 0 else int(targets[t - 1])
        prev_ids.append(prev)
        e = params["dec.emb"][prev]
        a_t = params["dec.wh"] @ h_seq[-1] + params["dec.we"] @ e \
            + params["dec.wc"] @ context + params["dec.bh"]
        h_t = np.tanh(a_t)
        logits = params["dec.wout"] @ h_t + params["dec.bout"]
        p = softmax_rows(logits)
        ce_sum -= math.log(max(p[targets[t]], 1e-300))
        h_seq.append(h_t)
        probs_seq.append(p)
    cache.update(h_seq=h_seq, prev_ids=prev_ids, probs_seq=probs_seq, targets=targets)

    ce = ce_sum / t_out
    kl = float(np.mean(kl_terms)) if kl_terms else 0.0
    cosine = float(np.mean(cosine_terms)) if cosine_terms else 0.0
    cache["n_kl_terms"] = len(kl_terms)
    parts = {"ce": ce, "kl": kl, "cosine": cosine}
    return parts, cache


def greedy_decode(state, s):
    """Autoregressive greedy decoding; returns predicted token ids."""
    cfg = state.cfg
    parts_cache = forward_sample(state, SampleInputs(
        frames=s.frames, targets=np.zeros(1, dtype=np.int64), queries=s.queries,
        gaze_dists=s.gaze_dists, gaze_tokens=s.gaze_tokens), train=False)
    context = parts_cache[1]["context"]
    params = state.params
    h = np.zeros(cfg.d_hidden)
    prev = cfg.vocab_size
    out = []
    for _ in range(cfg.out_tokens):
        e = params["dec.emb"][prev]
        a_t = params["dec.wh"] @ h + params["dec.we"] @ e \
            + params["dec.wc"] @ context + params["dec.bh"]
        h = np.tanh(a_t)
        logits = params["dec.wout"] @ h + params["dec.bout"]
        prev = int(np.argmax(logits))
        out.append(prev)
    return np.asarray(out, dtype=np.int64)


def batch_loss(state, batch, train=True):
    """Mean LossBreakdown over a batch; caches returned for backward."""
    ces, kls, cosines, caches = [], [], [], []
    for s in batch:
        parts, cache = forward_sample(state, s, train)
        ces.append(parts["ce"])
        kls.append(parts["kl"])
        cosines.append(parts["cosine"])
        caches.append(cache)
    breakdown = LossBreakdown.compose(
        ce=float(np.mean(ces)), kl=float(np.mean(kls)),
        cosine=float(np.mean(cosines)), lambda_=state.cfg.lambda_,
    )
    return breakdown, caches


# ---------------------------------------------------------------------------
# backward


def _backward_sample(state, s, cache, grads):
    cfg = state.cfg
    params = state.params
    grid = state.grid()
    lam = cfg.lambda_

    targets = cache["targets"]
    t_out = len(targets)
    dctx = np.zeros(cfg.d_ctx)
    dh_next = np.zeros(cfg.d_hidden)
    for t in reversed(range(t_out)):
        dlogits = cache["probs_seq"][t].copy()
        dlogits[targets[t]] -= 1.0
        dlogits /= t_out
        h_t = cache["h_seq"][t + 1]
        grads["dec.wout"] += np.outer(dlogits, h_t)
        grads["dec.bout"] += dlogits
        dh = params["dec.wout"].T @ dlogits + dh_next
        da = dh * (1.0 - h_t * h_t)
        prev = cache["prev_ids"][t]
        e = params["dec.emb"][prev]
        grads["dec.wh"] += np.outer(da, cache["h_seq"][t])
        grads["dec.we"] += np.outer(da, e)
        grads["dec.wc"] += np.outer(da, cache["context"])
        grads["dec.bh"] += da
        grads["dec.emb"][prev] += params["dec.we"].T @ da
        dctx += params["dec.wc"].T @ da
        dh_next = params["dec.wh"].T @ da

    dctx_pre = dctx * (1.0 - cache["context"] ** 2)
    grads["pool.w"] += np.outer(dctx_pre, cache["ctx_in"])
    grads["pool.b"] += dctx_pre
    dctx_in = params["pool.w"].T @ dctx_pre

    d = cfg.d_model
    dframe_vecs = [dctx_in[f * d : (f + 1) * d] for f in range(cfg.tau_o)]
    if cfg.query_mode == "gaze-text":
        off = cfg.tau_o * d
        for f in range(cfg.tau_o):
            row = int(s.gaze_tokens[f])
            grads["gaze_text.emb"][row] += dctx_in[off + f * d : off + (f + 1) * d]

    n = grid.n
    dkv_tokens = [np.zeros((n, d)) for _ in range(cfg.tau_o)]
    dquery_images = [None] * cfg.tau_o

    for f in range(cfg.tau_o):
        dvec = dframe_vecs[f]
        grads["time_emb"][f] += dvec
        dtokens = np.repeat(dvec[None, :], n, axis=0) / n
        if uses_gaze_block(cfg):
            dq = dtokens
            for i in reversed(range(cfg.n_blocks)):
                bc = cache["blocks"][f][i]
                if s.gaze_dists is not None and lam != 0.0 and cache["n_kl_terms"]:
                    dist = bc["a"].mean(axis=(0, 1))
                    hp = bc["hp"]
                    safe = np.maximum(dist, 1e-300)
                    bc["d_dist"] = lam * (np.log(safe / hp) + 1.0) / cache["n_kl_terms"]
                else:
                    bc["d_dist"] = None
                dq, dkv, bgrads = _attn_backward(dq, bc, _block_params(params, i))
                for k, g in bgrads.items():
                    grads[f"block{i}.{k}"] += g
                dkv_tokens[f] += dkv
            # dq is now the gradient wrt the query embedding tokens
            flat = cache["query_flat"][f]
            grads["embed_gaze.w"] += flat.T @ dq
            grads["embed_gaze.b"] += dq.sum(axis=0)
            if cfg.query_mode == "pseudo":
                dquery_images[f] = unpatchify(
                    dq @ params["embed_gaze.w"].T, grid, cfg.channels
                )
        else:
            dkv_tokens[f] += dtokens

    # cosine path: gradient into predicted overlays through the frozen embedder
    if uses_pseudo(cfg) and "dpred_embs" in cache:
        fw = state.buffers["frozen.embed.w"]
        for f in range(cfg.tau_o):
            dpred = cache["dpred_embs"][f] / cfg.tau_o  # mean over frames
            dflat = np.repeat((dpred @ fw.T)[None, :], grid.n, axis=0) / grid.n
            dimg = unpatchify(dflat, grid, cfg.channels)
            if cfg.query_mode == "pseudo":
                dquery_images[f] = dimg if dquery_images[f] is None \
                    else dquery_images[f] + dimg
            else:
                pcache, bcache = cache["cotrain"][f]
                dheat = _blend_backward(dimg, bcache)
                pgrads = pseudo.backward(
                    {k[len("pseudo."):]: v for k, v in params.items()
                     if k.startswith("pseudo.")}, pcache, dheat)
                for k, g in pgrads.items():
                    grads[f"pseudo.{k}"] += g

    # pseudo net: overlay blend and conv chain
    if cfg.query_mode == "pseudo":
        pp = {k[len("pseudo."):]: v for k, v in params.items() if k.startswith("pseudo.")}
        for f in range(cfg.tau_o):
            if dquery_images[f] is None:
                continue
            dheat = _blend_backward(dquery_images[f], cache["blend"][f])
            pgrads = pseudo.backward(pp, cache["pseudo"][f], dheat)
            for k, g in pgrads.items():
                grads[f"pseudo.{k}"] += g

    for f in range(cfg.tau_o):
        flat = cache["kv_flat"][f]
        grads["embed_rgb.w"] += flat.T @ dkv_tokens[f]
        grads["embed_rgb.b"] += dkv_tokens[f].sum(axis=0)


def backward_batch(state, batch, caches):
    """Mean-loss gradients for every parameter; verifies finiteness."""
    grads = {k: np.zeros_like(v) for k, v in state.params.items()}
    for s, cache in zip(batch, caches):
        _backward_sample(state, s, cache, grads)
    inv = 1.0 / len(batch)
    for name, g in grads.items():
        g *= inv
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
    return grads


def sgd_step(state, grads, lr, momentum, velocity, grad_clip=0.0):
    if grad_clip:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > grad_clip:
            scale = grad_clip / total
            grads = {k: g * scale for k, g in grads.items()}
    for name, p in state.params.items():
        g = grads[name]
        if momentum:
            velocity[name] = momentum * velocity[name] + g
            g = velocity[name]
        p -= lr * g


def finite_difference_check(state, batch, step=1e-4):
    """Central-difference check of every parameter tensor.

    Returns {name: relative error}, where the error is the max absolute
    deviation scaled by the larger of the two gradients' max-norms.
    """
    breakdown, caches = batch_loss(state, batch, train=True)
    analytic = backward_batch(state, batch, caches)

    def total():
        return batch_loss(state, batch, train=True)[0].total

    errors = {}
    for name, arr in state.params.items():
        fd = np.zeros_like(arr)
        flat = arr.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = total()
            flat[i] = orig - step
            lm = total()
            flat[i] = orig
            fd_flat[i] = (lp - lm) / (2.0 * step)
        a = analytic[name]
        denom = max(float(np.max(np.abs(a))), float(np.max(np.abs(fd))), 1e-8)
        errors[name] = float(np.max(np.abs(a - fd))) / denom
    return errors


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, state):
    os.makedirs(os.path.join(directory, "params"), exist_ok=True)
    manifest = {
        "format": 1,
        "seed": state.cfg.seed,
        "config_hash": state.cfg.train_signature(),
        "config": state.cfg.to_dict(),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in state.params.items()],
        "buffers": [{"name": k, "shape": list(v.shape)} for k, v in state.buffers.items()],
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    for k, v in list(state.params.items()) + list(state.buffers.items()):
        path = os.path.join(directory, "params", f"{k}.bin")
        v.astype("<f4").tofile(path)


def load_checkpoint(directory, expected_hash=None):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise ParseError(f"no checkpoint manifest at {path}") from None
    cfg = RunConfig.from_dict(manifest["config"])
    if expected_hash is not None and manifest["config_hash"] != expected_hash:
        raise HashMismatchError(manifest["config_hash"], expected_hash)

    def read(entry):
        shape = tuple(entry["shape"])
        data = np.fromfile(
            os.path.join(directory, "params", f"{entry['name']}.bin"), dtype="<f4"
        )
        if data.size != int(np.prod(shape)):
            raise ParseError(f"checkpoint blob {entry['name']} has wrong size")
        return data.reshape(shape).astype(np.float64)

    params = {e["name"]: read(e) for e in manifest["params"]}
    buffers = {e["name"]: read(e) for e in manifest["buffers"]}
    return ModelState(cfg=cfg, params=params, buffers=buffers)
