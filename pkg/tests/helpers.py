"""Independent numerical oracles shared by the test modules."""

import numpy as np
import torch


def central_difference(fn, x: torch.Tensor, coords, eps: float = 1e-6) -> np.ndarray:
    """d fn / d x at flat indices ``coords`` by central differences (x is perturbed in place)."""
    flat = x.data.view(-1)
    out = []
    for i in coords:
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(fn())
        flat[i] = old - eps
        lo = float(fn())
        flat[i] = old
        out.append((hi - lo) / (2 * eps))
    return np.array(out)


def one_sided_differences(fn, x: torch.Tensor, coords, eps: float = 1e-6):
    """Forward, backward and central differences at flat indices ``coords``."""
    flat = x.data.view(-1)
    f0 = float(fn())
    fwd, bwd = [], []
    for i in coords:
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(fn())
        flat[i] = old - eps
        lo = float(fn())
        flat[i] = old
        fwd.append((hi - f0) / eps)
        bwd.append((f0 - lo) / eps)
    fwd, bwd = np.array(fwd), np.array(bwd)
    return fwd, bwd, 0.5 * (fwd + bwd)


def smooth_mask(fwd, bwd, tol: float = 1e-4) -> np.ndarray:
    """True where one-sided slopes agree, i.e. no PReLU kink lies within +-eps."""
    scale = np.maximum(np.maximum(np.abs(fwd), np.abs(bwd)), 1e-3 * max(np.abs(fwd).max(), np.abs(bwd).max(), 1e-300))
    return np.abs(fwd - bwd) <= tol * scale


def max_relative_error(analytic, numeric, floor_frac: float = 1e-3) -> float:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)`` with floor a fraction of the largest entry."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    floor = floor_frac * max(np.abs(a).max(), np.abs(n).max(), 1e-300)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def brute_force_mse(x: np.ndarray, x_hat: np.ndarray) -> float:
    total = 0.0
    for img, rec in zip(x, x_hat):
        acc, n = 0.0, 0
        for a, b in zip(img.ravel().tolist(), rec.ravel().tolist()):
            acc += (a - b) * (a - b)
            n += 1
        total += acc / n
    return total / len(x)


def brute_force_psnr(x: np.ndarray, x_hat: np.ndarray, max_value: float = 1.0) -> list[float]:
    import math

    out = []
    for img, rec in zip(x, x_hat):
        acc, n = 0.0, 0
        for a, b in zip(img.ravel().tolist(), rec.ravel().tolist()):
            acc += (a - b) ** 2
            n += 1
        mse = acc / n
        out.append(100.0 if mse == 0 else min(100.0, 10 * math.log10(max_value**2 / mse)))
    return out


def end_to_end_gradient_check(model, seed: int = 0, n_coords: int = 120, variance: float = 0.1):
    """Compare autograd with central differences through encode -> AWGN -> decode -> MSE.

    Checks sampled input pixels and sampled entries of every parameter
    tensor. Coordinates whose +-eps probe straddles a PReLU kink (one-sided
    slopes disagree) are not differentiable there and are left out.
    Returns ``(max relative error, fraction of coordinates left out)``.
    """
    from snrjscc.channel import awgn
    from snrjscc.training import mse_loss

    model = model.double().train()
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.random((1, 32, 32, 3))).requires_grad_(True)
    target = x.detach().clone()

    def loss():
        g = torch.Generator().manual_seed(99)
        z = awgn(model.encode(x), variance, generator=g).received
        return mse_loss(target, model.decode(z, variance))

    model.zero_grad()
    loss().backward()
    analytic, numeric, keep = [], [], []
    probes = [(x, rng.choice(x.numel(), size=n_coords, replace=False))]
    for _, p in model.named_parameters():
        probes.append((p, rng.choice(p.numel(), size=min(4, p.numel()), replace=False)))
    with torch.no_grad():
        for t, idx in probes:
            fwd, bwd, cen = one_sided_differences(loss, t, idx)
            analytic.append(t.grad.view(-1)[idx].numpy())
            numeric.append(cen)
            keep.append(smooth_mask(fwd, bwd))
    a, n, k = np.concatenate(analytic), np.concatenate(numeric), np.concatenate(keep)
    return max_relative_error(a[k], n[k]), 1.0 - k.mean()


def adaptivity_verdict(adaptive, baseline, slack=0.2, margin=1.0):
    """Adaptive curve non-decreasing within ``slack`` and ahead of the baseline at 0 dB by ``margin``."""
    from snrjscc.evaluation import is_nondecreasing

    ada = [r.mean_psnr for r in sorted(adaptive.rows, key=lambda r: r.test_snr)]
    a0 = adaptive.lookup(test_snr=0.0)[0].mean_psnr
    b0 = baseline.lookup(test_snr=0.0)[0].mean_psnr
    mono = is_nondecreasing(ada, slack)
    gap = a0 - b0
    detail = f"adaptive {[round(v, 2) for v in ada]} dB; 0 dB gap over baseline {gap:+.2f} dB"
    return mono and gap >= margin, detail


def robustness_verdict(exact, noisy1, noisy4):
    """Noise-1 mean drop < 0.3 dB; noise-4 drop < 1 dB at 20 dB and at every SNR >= 10 dB."""
    from snrjscc.evaluation import mean_drop

    d1 = mean_drop(exact, noisy1)
    ref = {r.test_snr: r.mean_psnr for r in exact.rows}
    d4 = {r.test_snr: ref[r.test_snr] - r.mean_psnr for r in noisy4.rows}
    ok = d1 < 0.3 and d4[20.0] < 1.0 and all(d < 1.0 for s, d in d4.items() if s >= 10.0)
    detail = f"var 1 mean drop {d1:.3f} dB; var 4 drops {{{', '.join(f'{s:g}: {d:.2f}' for s, d in sorted(d4.items()))}}}"
    return ok, detail
