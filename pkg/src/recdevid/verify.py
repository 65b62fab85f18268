"""Self-check suite: gradient checks, brute-force oracles, shape traces and
format round trips.  Each check reports its measured error and threshold."""
from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import features as F
from . import layers as L
from . import tensor as T
from .tensor import Tensor


@dataclass
class CheckResult:
    group: str
    name: str
    measured: float
    threshold: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.measured)) and self.measured <= self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.group:<9} {self.name:<40} measured={self.measured:.3e}  threshold={self.threshold:.1e}{extra}"


_REGISTRY: list[tuple[str, Callable[[], list[CheckResult]]]] = []


def register(group: str):
    def deco(fn):
        _REGISTRY.append((group, fn))
        return fn
    return deco


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

def _wsum(y: Tensor, seed: int) -> Tensor:
    w = np.random.default_rng(seed).normal(size=y.shape)
    return T.sum(y * Tensor(w.astype(y.dtype)))


def layer_gradient_cases(seed: int = 0):
    """(layer name, scalar function, tensors to check) on small configurations.

    Built under the active precision; every function closes over its tensors
    so parameters and inputs can be perturbed in place.
    """
    rng = np.random.default_rng(seed)
    cases = []

    conv = L.ConvLSTM1D(5, 2, 2, kernel=3, stride=1, rng=rng)
    conv.peep.data = rng.normal(scale=0.5, size=conv.peep.shape).astype(conv.peep.dtype)
    x_t = Tensor(rng.normal(size=(2, 5, 2)))
    h0 = Tensor(rng.normal(scale=0.5, size=(2, 3, 2)))
    c0 = Tensor(rng.normal(scale=0.5, size=(2, 3, 2)))

    def conv_step(_):
        h, c = conv.step(x_t, (h0, c0))
        return _wsum(h, 1) + _wsum(c, 2)
    cases.append(("ConvLSTM1D.step", conv_step, conv.parameters() + [x_t, h0, c0]))

    conv2 = L.ConvLSTM1D(7, 2, 2, kernel=3, stride=2, rng=rng)
    conv2.peep.data = rng.normal(scale=0.5, size=conv2.peep.shape).astype(conv2.peep.dtype)
    seq = Tensor(rng.normal(size=(3, 2, 7, 2)))
    cases.append(("ConvLSTM1D.forward", lambda _: _wsum(conv2(seq), 3), conv2.parameters() + [seq]))

    bn = L.BatchNorm(3)
    bn.gamma.data = rng.uniform(0.5, 1.5, size=3).astype(bn.gamma.dtype)
    bn.beta.data = rng.normal(size=3).astype(bn.beta.dtype)
    xb = Tensor(rng.normal(loc=2.0, scale=3.0, size=(2, 3, 4, 3)))
    cases.append(("BatchNorm.train", lambda _: _wsum(bn(xb, training=True), 4), [bn.gamma, bn.beta, xb]))
    bn_inf = L.BatchNorm(3)
    bn_inf.set_buffer("running_mean", rng.normal(size=3))
    bn_inf.set_buffer("running_var", rng.uniform(0.5, 2.0, size=3))
    cases.append(("BatchNorm.infer", lambda _: _wsum(bn_inf(xb, training=False), 5),
                  [bn_inf.gamma, bn_inf.beta, xb]))

    lstm = L.LSTM(3, 4, rng)
    s = Tensor(rng.normal(size=(4, 2, 3)))
    cases.append(("LSTM.forward", lambda _: _wsum(lstm(s), 6), lstm.parameters() + [s]))
    cases.append(("LSTM.reverse", lambda _: _wsum(lstm(s, reverse=True), 7), lstm.parameters() + [s]))
    bil = L.BiLSTM(3, 4, rng)
    cases.append(("BiLSTM", lambda _: _wsum(bil(s), 8), bil.parameters() + [s]))

    q = Tensor(rng.normal(size=(2, 3, 4)))
    k = Tensor(rng.normal(size=(2, 3, 4)))
    v = Tensor(rng.normal(size=(2, 3, 5)))
    cases.append(("attention", lambda _: _wsum(L.attention(q, k, v), 9), [q, k, v]))

    mha = L.MultiHeadAttention(6, heads=2, head_dim=3, rng=rng)
    xt = Tensor(rng.normal(size=(2, 4, 6)))
    cases.append(("MultiHeadAttention", lambda _: _wsum(mha(xt), 10), mha.parameters() + [xt]))

    ln = L.LayerNorm(5)
    ln.g.data = rng.uniform(0.5, 1.5, size=5).astype(ln.g.dtype)
    ln.b.data = rng.normal(size=5).astype(ln.b.dtype)
    xl = Tensor(rng.normal(size=(3, 5)))
    cases.append(("LayerNorm", lambda _: _wsum(ln(xl), 11), ln.parameters() + [xl]))

    dense = L.Dense(4, 3, "relu", rng)
    dense.b.data = rng.uniform(0.5, 1.0, size=3).astype(dense.b.dtype)  # keep units away from the kink
    xd = Tensor(rng.uniform(0.1, 1.0, size=(5, 4)))
    dense.w.data = np.abs(dense.w.data)
    cases.append(("Dense", lambda _: _wsum(dense(xd), 12), dense.parameters() + [xd]))
    dense_lin = L.Dense(4, 3, None, rng)
    xd2 = Tensor(rng.normal(size=(5, 4)))
    cases.append(("Dense.linear", lambda _: _wsum(dense_lin(xd2), 13), dense_lin.parameters() + [xd2]))

    enc = L.EncoderBlock(6, heads=2, head_dim=3, ff_units=8, rng=rng)
    enc.ff1.b.data = rng.uniform(0.2, 0.6, size=enc.ff1.b.shape).astype(enc.ff1.b.dtype)
    xe = Tensor(rng.normal(size=(2, 4, 6)))
    cases.append(("EncoderBlock", lambda _: _wsum(enc(xe), 14), enc.parameters() + [xe]))
    return cases


def gradient_errors(dtype, seed: int = 0, max_coords: int = 24) -> dict[str, float]:
    """Worst finite-difference error per layer in the given precision."""
    eps = 1e-3 if np.dtype(dtype) == np.float32 else 1e-6
    out = {}
    with T.precision(dtype):
        for name, fn, tensors in layer_gradient_cases(seed):
            worst = 0.0
            for t in tensors:
                worst = max(worst, T.finite_diff_check(fn, t, eps=eps, max_coords=max_coords, seed=seed))
            out[name] = worst
    return out


@register("gradient")
def _grad32():
    return [CheckResult("gradient", f"{n} (float32)", e, 1e-3) for n, e in gradient_errors(np.float32).items()]


@register("gradient")
def _grad64():
    return [CheckResult("gradient", f"{n} (float64)", e, 1e-6) for n, e in gradient_errors(np.float64).items()]


# ---------------------------------------------------------------------------
# brute-force references
# ---------------------------------------------------------------------------

def ref_dft_power(x, n):
    x = np.concatenate([np.asarray(x, dtype=np.float64), np.zeros(n - len(x))])
    k = np.arange(n // 2 + 1)[:, None]
    idx = np.arange(n)[None, :]
    re = (x * np.cos(2 * np.pi * k * idx / n)).sum(axis=1)
    im = (x * np.sin(2 * np.pi * k * idx / n)).sum(axis=1)
    return re * re + im * im


def ref_dct2(x):
    n = len(x)
    out = np.empty(n)
    for k in range(n):
        out[k] = sum(x[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
        out[k] *= math.sqrt((1.0 if k == 0 else 2.0) / n)
    return out


def ref_delta(seq, n=2):
    seq = np.asarray(seq, dtype=np.float64)
    frames = len(seq)
    out = np.zeros_like(seq)
    for t in range(frames):
        for i in range(1, n + 1):
            out[t] += i * (seq[min(t + i, frames - 1)] - seq[max(t - i, 0)])
    return out / (2 * sum(i * i for i in range(1, n + 1)))


def ref_softmax(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    return np.array(e) / sum(e)


def ref_layer_norm(x, g, b, eps=1e-6):
    mu = sum(x) / len(x)
    sd = math.sqrt(sum((v - mu) ** 2 for v in x) / len(x) + eps)
    return np.array([g[i] * (x[i] - mu) / sd + b[i] for i in range(len(x))])


def ref_attention(q, k, v):
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        w = ref_softmax([float(q[i] @ k[j]) / math.sqrt(q.shape[1]) for j in range(k.shape[0])])
        out[i] = sum(w[j] * v[j] for j in range(k.shape[0]))
    return out


def _max_rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b)))) if a.size else 0.0


@register("oracle")
def _oracles(cases: int = 100):
    from .train import AdamState, adam_step, cross_entropy, softmax
    rng = np.random.default_rng(7)
    errs = {k: 0.0 for k in ("DFT power spectrum", "DCT-II", "delta", "softmax", "cross-entropy",
                             "LayerNorm", "attention", "Adam step", "pre-emphasis")}
    for _ in range(cases):
        n = int(rng.choice([8, 16, 32, 64]))
        x = rng.normal(size=int(rng.integers(1, n + 1)))
        errs["DFT power spectrum"] = max(errs["DFT power spectrum"], _max_rel(F.power_spectrum(x, n), ref_dft_power(x, n)))
        v = rng.normal(size=34)
        errs["DCT-II"] = max(errs["DCT-II"], _max_rel(F.mfcc_dct(v, 12), ref_dct2(v)[1:13]))
        seq = rng.normal(size=(int(rng.integers(1, 12)), 3))
        errs["delta"] = max(errs["delta"], _max_rel(F.delta(seq, 1), ref_delta(seq)),
                            _max_rel(F.delta(seq, 2), ref_delta(ref_delta(seq))))
        z = rng.normal(scale=3.0, size=int(rng.integers(2, 10)))
        errs["softmax"] = max(errs["softmax"], _max_rel(softmax(z), ref_softmax(z)))
        t = int(rng.integers(len(z)))
        errs["cross-entropy"] = max(errs["cross-entropy"],
                                    _max_rel(cross_entropy(softmax(z), t), -math.log(max(ref_softmax(z)[t], 1e-12))))
        h = int(rng.integers(2, 9))
        xv, g, b = rng.normal(size=h), rng.normal(size=h), rng.normal(size=h)
        with T.precision(np.float64):
            got = L.layer_norm(Tensor(xv), Tensor(g), Tensor(b)).data
            q, k, vv = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 5))
            att = L.attention(Tensor(q), Tensor(k), Tensor(vv)).data
        errs["LayerNorm"] = max(errs["LayerNorm"], _max_rel(got, ref_layer_norm(xv, g, b)))
        errs["attention"] = max(errs["attention"], _max_rel(att, ref_attention(q, k, vv)))
        p0, gr = rng.normal(size=5), rng.normal(size=5)
        st = AdamState.zeros_like([p0])
        p = p0.copy()
        lr = float(rng.uniform(1e-4, 1e-2))
        adam_step([p], [gr], st, lr)
        expect = p0 - lr * ((0.1 * gr) / 0.1) / (np.sqrt((0.001 * gr * gr) / 0.001) + 1e-8)
        errs["Adam step"] = max(errs["Adam step"], _max_rel(p, expect))
        alpha = float(rng.uniform(0, 0.99))
        sig = rng.normal(size=int(rng.integers(1, 20)))
        ref = np.array([sig[0]] + [sig[i] - alpha * sig[i - 1] for i in range(1, len(sig))])
        errs["pre-emphasis"] = max(errs["pre-emphasis"], _max_rel(F.pre_emphasis(sig, alpha), ref))
    return [CheckResult("oracle", k, v, 1e-5, f"{cases} cases") for k, v in errs.items()]


@register("oracle")
def _scalar_cell():
    """1x1 ConvLSTM against the cell equations evaluated on scalars."""
    rng = np.random.default_rng(3)
    worst = 0.0
    with T.precision(np.float64):
        for _ in range(20):
            layer = L.ConvLSTM1D(1, 1, 1, kernel=1, stride=1, rng=rng)
            for p in layer.parameters():
                p.data = rng.normal(size=p.shape)
            wx, wh, pp, b = (p.data.reshape(-1) for p in (layer.w_x, layer.w_h, layer.peep, layer.b))
            xs = rng.normal(size=6)
            h = c = 0.0
            seq = layer(Tensor(xs.reshape(6, 1, 1))).data.reshape(-1)
            for t in range(6):
                sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
                i = sig(wx[0] * xs[t] + wh[0] * h + pp[0] * c + b[0])
                f = sig(wx[1] * xs[t] + wh[1] * h + pp[1] * c + b[1])
                g = math.tanh(wx[3] * xs[t] + wh[3] * h + b[3])
                c = f * c + i * g
                o = sig(wx[2] * xs[t] + wh[2] * h + pp[2] * c + b[2])
                h = o * math.tanh(c)
                worst = max(worst, abs(seq[t] - h))
    return [CheckResult("oracle", "ConvLSTM scalar cell", worst, 1e-12)]


@register("oracle")
def _metrics_oracle():
    from .metrics import MetricsReport
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 6))
        cm = rng.integers(0, 20, size=(n, n))
        rep = MetricsReport(cm)
        for k in range(n):
            tp, fn, fp = cm[k, k], cm[k].sum() - cm[k, k], cm[:, k].sum() - cm[k, k]
            if tp + fn:
                worst = max(worst, abs(rep.recall[k] - tp / (tp + fn)), abs(rep.f_score[k] - 2 * tp / (2 * tp + fp + fn)))
            if tp + fp:
                worst = max(worst, abs(rep.precision[k] - tp / (tp + fp)))
        worst = max(worst, abs(rep.accuracy - np.trace(cm) / cm.sum()))
    return [CheckResult("oracle", "metrics vs counting", worst, 0.0)]


# ---------------------------------------------------------------------------
# shapes and persistence
# ---------------------------------------------------------------------------

@register("shape")
def _shapes():
    from .model import ablation_config, build, shape_trace
    x = np.random.default_rng(0).normal(size=(128, 73)).astype(np.float32)
    trace = dict(shape_trace(build(ablation_config(4, n_classes=45), 0), x))
    expected = {"input": (128, 73), "conv1": (128, 24, 64), "conv2": (128, 11, 32), "reshape": (128, 352),
                "bilstm": (256,), "mlp": (128,), "logits": (45,)}
    bad = [k for k, v in expected.items() if trace.get(k) != v]
    results = [CheckResult("shape", "full model trace", float(len(bad)), 0.0, ",".join(bad))]
    failed = []
    for g in range(1, 8):
        try:
            tr = dict(shape_trace(build(ablation_config(g, n_classes=5), 0), x))
            if tr["logits"] != (5,):
                failed.append(str(g))
        except Exception as exc:  # report, do not abort the suite
            failed.append(f"{g}:{type(exc).__name__}")
    results.append(CheckResult("shape", "ablation groups 1-7 forward", float(len(failed)), 0.0, ",".join(failed)))
    return results


@register("roundtrip")
def _roundtrips():
    from . import ttf
    from .audio import parse_wav, wav_bytes
    from .checkpoint import load_checkpoint, save_checkpoint
    from .model import ablation_config, build, forward
    rng = np.random.default_rng(5)
    res = []
    feats = rng.normal(size=(4, 8, 3)).astype(np.float32)
    labels = [0, None, 3, 1]
    back, lab = ttf.decode(ttf.encode(feats, labels))
    res.append(CheckResult("roundtrip", "TTF1 features+labels",
                           float(back.tobytes() != feats.tobytes() or lab != labels), 0.0))
    q = np.round(rng.uniform(-1, 1, size=500) * 32768).clip(-32768, 32767) / 32768
    clip = parse_wav(wav_bytes(q, 16000, 16))
    res.append(CheckResult("roundtrip", "WAV 16-bit PCM", float(np.max(np.abs(clip.samples - q))), 0.0))
    model = build(ablation_config(4, n_classes=3, bilstm_units=8, convlstm_specs=[[4, 3, 3], [2, 3, 2]],
                                  heads=2, head_dim=4, ff_units=8, mlp_units=8, block_size=4), 1)
    x = rng.normal(size=(128, 73)).astype(np.float32)
    before = forward(model, x)
    with tempfile.TemporaryDirectory() as tmp:
        save_checkpoint(model, tmp)
        after = forward(load_checkpoint(tmp), x)
    res.append(CheckResult("roundtrip", "checkpoint forward bit-exact", float(before.tobytes() != after.tobytes()), 0.0))
    return res


def run_checks(groups=None) -> list[CheckResult]:
    results = []
    for group, fn in _REGISTRY:
        if groups and group not in groups:
            continue
        try:
            results.extend(fn())
        except Exception as exc:
            results.append(CheckResult(group, fn.__name__.strip("_"), float("inf"), 0.0,
                                       f"raised {type(exc).__name__}: {exc}"))
    return results


def format_report(results) -> str:
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
