"""Central finite-difference gradient checking for tests."""
import numpy as np

from anodfd import tensor as T
from anodfd.nn import Linear, Parameter, multi_head_self_attention

STEP = 1e-3
RTOL = 1e-4


def numeric_grad(fn, arrays, index, step=STEP):
    """d fn / d arrays[index] by central differences; ``fn`` maps arrays to a float."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = fn(arrays)
        x[i] = orig - step
        fm = fn(arrays)
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def relative_error(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if max(na, nb) < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / max(na, nb))


def check_gradients(build, arrays, rtol=RTOL):
    """Compare tape gradients of ``build(*tensors) -> scalar Tensor`` with finite differences.

    Returns the worst relative error over all inputs.
    """
    params = [Parameter(a.copy()) for a in arrays]
    build(*params).backward()
    analytic = [p.grad.copy() for p in params]

    def f(arrs):
        return float(build(*[Parameter(a) for a in arrs]).data)

    arrs = [a.copy() for a in arrays]
    worst = 0.0
    for k in range(len(arrays)):
        worst = max(worst, relative_error(analytic[k], numeric_grad(f, arrs, k)))
    return worst


def _away_from_zero(r, shape, margin=0.05):
    """Values with |x| >= margin so kinks (relu, abs) sit outside the FD stencil."""
    x = r.standard_normal(shape)
    return np.sign(x) * (margin + np.abs(x))


def _shape(r, ndim, lo=1, hi=4):
    return tuple(int(s) for s in r.integers(lo, hi + 1, size=ndim))



def _primitive_cases():
    def unary(op, data=None):
        def make(r):
            s = _shape(r, int(r.integers(1, 4)))
            x = data(r, s) if data else r.standard_normal(s)
            R = r.standard_normal(s)
            return (lambda a: T.sum_all(T.mul(op(a), R))), [x]
        return make

    def binary(op):
        def make(r):
            s = _shape(r, 3)
            # second operand may broadcast along leading axes
            s2 = s if r.random() < 0.5 else (1,) + s[1:]
            R = r.standard_normal(s)
            return (lambda a, b: T.sum_all(T.mul(op(a, b), R))), [r.standard_normal(s), r.standard_normal(s2)]
        return make

    def reshape(r):
        s = _shape(r, 3)
        R = r.standard_normal((s[0] * s[1], s[2]))
        return (lambda a: T.sum_all(T.mul(T.reshape(a, R.shape), R))), [r.standard_normal(s)]

    def transpose(r):
        s = _shape(r, 3)
        axes = tuple(int(i) for i in r.permutation(3))
        R = r.standard_normal(tuple(s[i] for i in axes))
        return (lambda a: T.sum_all(T.mul(T.transpose(a, axes), R))), [r.standard_normal(s)]

    def concat(r):
        b, h, w = _shape(r, 3)
        c1, c2 = int(r.integers(1, 4)), int(r.integers(1, 4))
        R = r.standard_normal((b, c1 + c2, h, w))
        return (lambda a, c: T.sum_all(T.mul(T.concat([a, c], axis=1), R))), \
            [r.standard_normal((b, c1, h, w)), r.standard_normal((b, c2, h, w))]

    def upsample(r):
        s = _shape(r, 4)
        R = r.standard_normal(s[:2] + (2 * s[2], 2 * s[3]))
        return (lambda a: T.sum_all(T.mul(T.upsample2x(a), R))), [r.standard_normal(s)]

    def matmul(r):
        b, n, k, m = _shape(r, 4)
        R = r.standard_normal((b, n, m))
        return (lambda a, c: T.sum_all(T.mul(T.matmul(a, c), R))), \
            [r.standard_normal((b, n, k)), r.standard_normal((b, k, m))]

    def linear(r):
        b, l, i, o = _shape(r, 4)
        R = r.standard_normal((b, l, o))
        return (lambda x, w, c: T.sum_all(T.mul(T.linear(x, w, c), R))), \
            [r.standard_normal((b, l, i)), r.standard_normal((i, o)), r.standard_normal(o)]

    def conv(r):
        stride, pad = int(r.integers(1, 3)), int(r.integers(0, 2))
        c, o, k = int(r.integers(1, 3)), int(r.integers(1, 3)), int(r.choice([1, 3]))
        h, w = int(r.integers(k, 7)), int(r.integers(k, 7))
        ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
        R = r.standard_normal((2, o, ho, wo))
        return (lambda x, wt, b: T.sum_all(T.mul(T.conv2d(x, wt, b, stride, pad), R))), \
            [r.standard_normal((2, c, h, w)), r.standard_normal((o, c, k, k)), r.standard_normal(o)]

    def softmax(r):
        s = _shape(r, 2, 1, 6)
        R = r.standard_normal(s)
        return (lambda a: T.sum_all(T.mul(T.softmax(a), R))), [2 * r.standard_normal(s)]

    def layer_norm(r):
        s = _shape(r, 2, 2, 6)
        # nearly-constant slices make normalization so curved that a 1e-3
        # stencil is no longer accurate; keep every slice spread out
        x = r.standard_normal(s)
        while x.std(axis=-1).min() < 0.5:
            x = r.standard_normal(s)
        R = r.standard_normal(s)
        return (lambda x, g, b: T.sum_all(T.mul(T.layer_norm(x, g, b), R))), \
            [x, r.standard_normal(s[-1]), r.standard_normal(s[-1])]

    def bce(r):
        s = _shape(r, 3)
        y = (r.random(s) > 0.5).astype(float)
        return (lambda p: T.bce(p, y)), [r.uniform(0.1, 0.9, s)]

    def attention(r):
        heads = int(r.choice([1, 2]))
        d = heads * int(r.integers(1, 4))
        l = int(r.integers(1, 5))
        lins = [Linear(d, d, r, np.float64) for _ in range(4)]
        R = r.standard_normal((l, d))

        def build(z, wq, wk, wv, wo):
            for lin, w in zip(lins, (wq, wk, wv, wo)):
                lin.weight = w
            return T.sum_all(T.mul(multi_head_self_attention(z, heads, *lins), R))

        return build, [r.standard_normal((l, d))] + [r.standard_normal((d, d)) for _ in range(4)]

    return {
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "abs": unary(T.absolute, _away_from_zero),
        "relu": unary(T.relu, _away_from_zero),
        "gelu": unary(T.gelu),
        "sigmoid": unary(T.sigmoid),
        "sum": unary(lambda a: T.mul(T.sum_all(a), 1.0)),
        "mean": unary(lambda a: T.mul(T.mean_all(a), 1.0)),
        "reshape": reshape,
        "transpose": transpose,
        "concat": concat,
        "upsample2x": upsample,
        "matmul": matmul,
        "linear": linear,
        "conv2d": conv,
        "softmax": softmax,
        "layer_norm": layer_norm,
        "bce": bce,
        "attention": attention,
    }


PRIMITIVES = tuple(_primitive_cases())


def primitive_error(name, trial):
    """Worst relative gradient error of one randomized trial of primitive ``name``."""
    r = np.random.default_rng([PRIMITIVES.index(name), trial])
    build, arrays = _primitive_cases()[name](r)
    return check_gradients(build, arrays)


class ActivationPattern:
    """Records, and optionally freezes, the side of zero of every relu / abs input.

    The network is piecewise smooth. A central difference whose stencil crosses
    a relu or abs kink measures a chord, not the gradient. With ``freeze`` on,
    each relu multiplies by the mask seen at the base point and each abs by the
    base sign, so a finite difference measures the derivative of the smooth
    piece containing the base point, which is what backprop computes.
    """

    def __init__(self):
        self.patterns = []
        self.frozen = None

    def __enter__(self):
        self._orig = T.relu, T.absolute
        relu, absolute = self._orig

        def wrap(kind, fn):
            def inner(x):
                pattern = (x.data > 0).astype(x.data.dtype) if kind == "relu" else np.sign(x.data)
                if self.frozen is not None:
                    fixed = self.frozen[len(self.patterns)]
                    self.patterns.append(pattern)
                    return T.mul(x, fixed)
                self.patterns.append(pattern)
                return fn(x)
            return inner

        T.relu, T.absolute = wrap("relu", relu), wrap("abs", absolute)
        return self

    def __exit__(self, *exc):
        T.relu, T.absolute = self._orig

    def take(self):
        out, self.patterns = self.patterns, []
        return out


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def model_gradient_error(model, cur, his, target, step=STEP):
    """FD check of BCE(model(cur, his), target) over every parameter element.

    Returns ``(frozen, smooth, kinked)``: the worst relative error against
    pattern-frozen central differences over all elements, the worst relative
    error against plain central differences over elements whose stencil
    crosses no kink, and the fraction of elements whose stencil does cross one.
    """
    def loss():
        return T.bce(model.forward(cur, his), target)

    model.zero_grad()
    with ActivationPattern() as pat:
        loss().backward()
        base = pat.take()
        frozen_err, smooth_err, kinked, total = 0.0, 0.0, 0, 0
        with T.no_grad():
            for p in model.parameters():
                plain = np.zeros_like(p.data)
                frozen = np.zeros_like(p.data)
                smooth = np.ones(p.data.shape, dtype=bool)
                for i in np.ndindex(p.data.shape):
                    orig = p.data[i]
                    vals = []
                    for sign in (1, -1):
                        p.data[i] = orig + sign * step
                        pat.frozen = None
                        vals.append(float(loss().data))
                        smooth[i] &= _same(pat.take(), base)
                        pat.frozen = base
                        vals.append(float(loss().data))
                        pat.take()
                    pat.frozen = None
                    p.data[i] = orig
                    plain[i] = (vals[0] - vals[2]) / (2 * step)
                    frozen[i] = (vals[1] - vals[3]) / (2 * step)
                total += smooth.size
                kinked += int((~smooth).sum())
                frozen_err = max(frozen_err, relative_error(p.grad, frozen))
                if smooth.any():
                    smooth_err = max(smooth_err, relative_error(p.grad[smooth], plain[smooth]))
    return frozen_err, smooth_err, kinked / total


def randomize_for_check(model, rng):
    """Move a fresh model to a generic, well-conditioned point for FD checks.

    At initialization biases are zero and E_pos is tiny, so tokens of cells
    with no difference have almost no spread and layer norm is too curved for
    a 1e-3 stencil. Gradient correctness does not depend on where we look.
    """
    for name, p in model.named_parameters():
        if name == "pos_embed":
            p.data[...] = rng.standard_normal(p.shape)
        elif name.endswith("gamma"):
            p.data[...] = 1.0 + 0.1 * rng.standard_normal(p.shape)
        elif name.endswith(("bias", "beta")):
            p.data[...] = 0.1 * rng.standard_normal(p.shape)
