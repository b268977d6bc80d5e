"""Shared test oracles: central finite differences and a brute-force conv."""

import numpy as np

from crackseg import backend


def central_diff(loss_fn, arr, index, step=1e-3):
    """d loss / d arr[index] by central differences, perturbing in place."""
    original = arr[index]
    arr[index] = original + step
    hi = loss_fn()
    arr[index] = original - step
    lo = loss_fn()
    arr[index] = original
    return (hi - lo) / (2.0 * step)


def grad_close(analytic, numeric, rel_tol=1e-2, abs_tol=1e-4):
    """Relative agreement with an absolute escape hatch for near-zero grads."""
    diff = abs(analytic - numeric)
    scale = max(abs(analytic), abs(numeric))
    return diff <= abs_tol or diff <= rel_tol * scale


def check_grads(make_loss, tensors, rng, n_probes=10, step=1e-3,
                rel_tol=1e-2, abs_tol=1e-4):
    """Compare analytic grads of `make_loss()` against finite differences.

    `make_loss` must rebuild the forward pass from scratch on every call
    (the recording is single-use); `tensors` are the leaves to probe.
    """
    loss = make_loss()
    backend.backward(loss)
    analytic = {t.name: t.grad.copy() for t in tensors}
    for t in tensors:
        flat = t.data.reshape(-1)
        for _ in range(n_probes):
            idx = int(rng.integers(flat.size))
            numeric = central_diff(lambda: make_loss().item(),
                                   flat, idx, step=step)
            a = float(analytic[t.name].reshape(-1)[idx])
            assert grad_close(a, numeric, rel_tol, abs_tol), (
                f"{t.name}[{idx}]: analytic {a:.6g} vs numeric {numeric:.6g}")


def wilcoxon_enumeration_oracle(a, b):
    """Literal enumeration of all 2^n sign patterns (practical to n ~ 16)."""
    import itertools

    diffs = np.asarray(a, float) - np.asarray(b, float)
    diffs = diffs[diffs != 0]
    n = diffs.size
    abs_sorted = np.sort(np.abs(diffs))
    ranks = np.empty(n)
    for i, d in enumerate(np.abs(diffs)):
        positions = np.nonzero(abs_sorted == d)[0]
        ranks[i] = positions.mean() + 1.0
    w_plus = ranks[diffs > 0].sum()
    w_minus = ranks[diffs < 0].sum()
    w_obs = min(w_plus, w_minus)
    count = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if w <= w_obs + 1e-9:
            count += 1
    return w_obs, min(1.0, 2.0 * count / 2 ** n)


def conv2d_direct(x, w, b=None, stride=1, pad="same"):
    """O(n^4) direct-summation convolution oracle (NCHW, odd kernels)."""
    batch, cin, height, width = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = ((kh - 1) // 2, (kw - 1) // 2) if pad == "same" else (0, 0)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    h_out = (height + 2 * ph - kh) // stride + 1
    w_out = (width + 2 * pw - kw) // stride + 1
    out = np.zeros((batch, cout, h_out, w_out), dtype=np.float64)
    for n in range(batch):
        for o in range(cout):
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out.astype(np.float32)
