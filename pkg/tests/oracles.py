"""Independent reference computations: plain Python loops over floats, no tensor ops."""
import math


def to_lists(t):
    return t.detach().double().tolist()


def conv2d(x, w, b, dilation=1, padding=0):
    """x[c][i][j], w[o][c][ki][kj], b[o]; zero padding, stride 1."""
    cin, h, wd = len(x), len(x[0]), len(x[0][0])
    k = len(w[0][0])
    oh = h + 2 * padding - dilation * (k - 1)
    ow = wd + 2 * padding - dilation * (k - 1)
    out = []
    for o in range(len(w)):
        plane = []
        for i in range(oh):
            row = []
            for j in range(ow):
                acc = b[o]
                for c in range(cin):
                    for ki in range(k):
                        for kj in range(k):
                            ii = i - padding + ki * dilation
                            jj = j - padding + kj * dilation
                            if 0 <= ii < h and 0 <= jj < wd:
                                acc += w[o][c][ki][kj] * x[c][ii][jj]
                row.append(acc)
            plane.append(row)
        out.append(plane)
    return out


def relu(x):
    return [[[max(v, 0.0) for v in row] for row in plane] for plane in x]


def add(x, y):
    return [[[a + b for a, b in zip(r1, r2)] for r1, r2 in zip(p1, p2)] for p1, p2 in zip(x, y)]


def msab(x, p, dilations=(1, 2), groups=2):
    """p: dict of (weight, bias) nested lists for reduce, branch_a, branch_b, fuse."""
    c = len(x)
    t = relu(conv2d(x, *p["reduce"]))
    a = relu(conv2d(t[: c // 2], *p["branch_a"], dilation=dilations[0], padding=dilations[0]))
    bb = relu(conv2d(t[c // 2:], *p["branch_b"], dilation=dilations[1], padding=dilations[1]))
    cat = a + bb
    per = c // groups
    shuffled = [cat[g * per + k] for k in range(per) for g in range(groups)]
    return add(x, conv2d(shuffled, *p["fuse"]))


def flat(x):
    if isinstance(x, (list, tuple)):
        for v in x:
            yield from flat(v)
    else:
        yield float(x)


def mean_abs_diff(a, b):
    fa, fb = list(flat(a)), list(flat(b))
    return sum(abs(u - v) for u, v in zip(fa, fb)) / len(fa)


def psnr(a, b, peak=1.0):
    fa, fb = list(flat(a)), list(flat(b))
    m = sum((u - v) ** 2 for u, v in zip(fa, fb)) / len(fa)
    return math.inf if m == 0 else 10 * math.log10(peak * peak / m)


def ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Single-plane SSIM, a and b as [row][col] lists, valid windows only."""
    half = (size - 1) / 2
    g = [math.exp(-((i - half) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    wsum = sum(g) ** 2
    w = [[g[i] * g[j] / wsum for j in range(size)] for i in range(size)]
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    h, wd = len(a), len(a[0])
    vals = []
    for i in range(h - size + 1):
        for j in range(wd - size + 1):
            ma = mb = 0.0
            for u in range(size):
                for v in range(size):
                    ma += w[u][v] * a[i + u][j + v]
                    mb += w[u][v] * b[i + u][j + v]
            va = vb = cov = 0.0
            for u in range(size):
                for v in range(size):
                    da = a[i + u][j + v] - ma
                    db = b[i + u][j + v] - mb
                    va += w[u][v] * da * da
                    vb += w[u][v] * db * db
                    cov += w[u][v] * da * db
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def central_differences(loss_fn, params, picks, step=1e-4):
    """Numeric d loss / d p[idx] for each (param, flat index) in picks."""
    out = []
    for p, idx in picks:
        flat_p = p.data.view(-1)
        orig = flat_p[idx].item()
        flat_p[idx] = orig + step
        up = loss_fn().item()
        flat_p[idx] = orig - step
        down = loss_fn().item()
        flat_p[idx] = orig
        out.append((up - down) / (2 * step))
    return out


def gradient_errors(model, loss_fn, n, seed=0, step=1e-4, floor=1e-8):
    """Relative |analytic - numeric| / max(|a|, |n|, floor) on n random scalar parameters."""
    import torch

    model.zero_grad()
    loss_fn().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    flat_ids = torch.randperm(int(sizes.sum()), generator=g)[:n].tolist()
    offsets = torch.cumsum(sizes, 0).long().tolist()
    picks = []
    for fid in flat_ids:
        k = next(i for i, end in enumerate(offsets) if fid < end)
        picks.append((params[k], fid - (offsets[k - 1] if k else 0)))
    analytic = [p.grad.view(-1)[i].item() for p, i in picks]
    with torch.no_grad():
        numeric = central_differences(loss_fn, params, picks, step)
    return [abs(a - b) / max(abs(a), abs(b), floor) for a, b in zip(analytic, numeric)]
