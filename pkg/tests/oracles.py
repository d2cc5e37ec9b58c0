"""Independent reference implementations used to freeze expected values.

Everything here is deliberately naive (explicit loops, direct summation)
and shares no code with the package paths it checks.
"""

import numpy as np


def dft2_direct(x):
    """O(N^2) direct 2-D DFT summation (unnormalized forward)."""
    x = np.asarray(x, dtype=np.complex128)
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for k in range(h):
        for l in range(w):
            acc = 0.0 + 0.0j
            for m in range(h):
                for n in range(w):
                    acc += x[m, n] * np.exp(-2j * np.pi * (k * m / h + l * n / w))
            out[k, l] = acc
    return out


def idft2_direct(spectrum):
    """Direct inverse DFT with 1/(H*W) normalization; returns the real part."""
    s = np.asarray(spectrum, dtype=np.complex128)
    h, w = s.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for m in range(h):
        for n in range(w):
            acc = 0.0 + 0.0j
            for k in range(h):
                for l in range(w):
                    acc += s[k, l] * np.exp(2j * np.pi * (k * m / h + l * n / w))
            out[m, n] = acc / (h * w)
    return out.real


def circular_cross_correlation(image, template):
    """Brute-force circular cross-correlation score for every shift."""
    image = np.asarray(image, dtype=np.float64)
    template = np.asarray(template, dtype=np.float64)
    h, w = image.shape
    scores = np.zeros((h, w))
    for dy in range(h):
        for dx in range(w):
            scores[dy, dx] = np.sum(image * np.roll(template, (dy, dx), axis=(0, 1)))
    return scores


def conv3x3_naive(x, weights, bias):
    """Direct 6-loop 3x3 same-padding convolution.

    x: (N, H, W, Cin); weights: (3, 3, Cin, Cout); bias: (Cout,).
    """
    n, h, w, cin = x.shape
    cout = weights.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, w, cout))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for o in range(cout):
                    acc = 0.0
                    for di in range(3):
                        for dj in range(3):
                            for c in range(cin):
                                acc += xp[b, i + di, j + dj, c] * weights[di, dj, c, o]
                    out[b, i, j, o] = acc + bias[o]
    return out


def batchnorm_naive(x, gamma, beta, running_mean, running_var, training, eps=1e-5):
    """Explicit batch-norm formula over (N, H, W) per channel."""
    if training:
        mu = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
    else:
        mu, var = running_mean, running_var
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def color_net_naive(weights, x, training):
    """Full color-CNN forward from the naive pieces above."""
    z1 = conv3x3_naive(x, weights.conv1_w, weights.conv1_b)
    r1 = np.where(z1 > 0, z1, 0.0)
    y1 = batchnorm_naive(
        r1, weights.bn1_gamma, weights.bn1_beta, weights.bn1_mean, weights.bn1_var, training
    )
    z2 = conv3x3_naive(y1, weights.conv2_w, weights.conv2_b)
    r2 = np.where(z2 > 0, z2, 0.0)
    y2 = batchnorm_naive(
        r2, weights.bn2_gamma, weights.bn2_beta, weights.bn2_mean, weights.bn2_var, training
    )
    pool = y2.mean(axis=(1, 2))
    return pool @ np.asarray(weights.fc_w).T + weights.fc_b


def composite_fold_naive(templates, masks, bottom):
    """Recursive back-to-front fold, one layer at a time."""
    out = np.array(bottom, dtype=np.float64, copy=True)
    for k in range(len(templates) - 1, -1, -1):
        m = masks[k][:, :, None]
        out = templates[k] * m + out * (1.0 - m)
    return np.clip(out, 0.0, 1.0)


def greedy_select_naive(image, templates, masks, bottom, n_max):
    """Reference greedy selection: re-fold the whole stack per evaluation.

    Returns (order, per-round errors). Ties break toward the lowest
    candidate index; selected candidates leave the pool.
    """
    image = np.asarray(image, dtype=np.float64)
    t = len(templates)
    remaining = list(range(t))
    order = []
    errors = []
    for _ in range(n_max):
        best_idx, best_err = None, None
        for cand in remaining:
            stack = order + [cand]
            comp = composite_fold_naive(
                [templates[k] for k in stack], [masks[k] for k in stack], bottom
            )
            err = float(np.mean((image - comp) ** 2))
            if best_err is None or err < best_err:
                best_idx, best_err = cand, err
        order.append(best_idx)
        remaining.remove(best_idx)
        errors.append(best_err)
    return order, errors


def ari_pair_counting(labels_a, labels_b):
    """Adjusted Rand index by O(n^2) pair enumeration."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    n = a.size
    n11 = n00 = n10 = n01 = 0
    for i in range(n):
        for j in range(i + 1, n):
            same_a = a[i] == a[j]
            same_b = b[i] == b[j]
            if same_a and same_b:
                n11 += 1
            elif same_a and not same_b:
                n10 += 1
            elif not same_a and same_b:
                n01 += 1
            else:
                n00 += 1
    num = 2 * (n11 * n00 - n10 * n01)
    den = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00)
    if den == 0:
        return 1.0
    return num / den


def central_difference(f, array, index, step):
    """Central finite difference of scalar f w.r.t. one array entry."""
    orig = array[index]
    array[index] = orig + step
    f_plus = f()
    array[index] = orig - step
    f_minus = f()
    array[index] = orig
    return (f_plus - f_minus) / (2.0 * step)


def relative_error(a, b, abs_floor=1e-8):
    """|a - b| / max(|a|, |b|), with an absolute escape for tiny values."""
    diff = abs(a - b)
    scale = max(abs(a), abs(b))
    if diff < abs_floor:
        return 0.0
    return diff / scale
