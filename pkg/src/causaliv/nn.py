"""Neural-network building blocks and optimizers over the autodiff engine."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, avg_pool2d, batch_norm_infer, batch_norm_train, conv2d


class Module:
    """Base class with parameter/buffer registration and train/eval modes."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array: np.ndarray):
        self._buffers[name] = name
        object.__setattr__(self, name, array)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def children(self):
        return list(self._children.values())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self, prefix: str = ""):
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def to_dtype(self, dtype):
        """Cast parameters and buffers in place (float32 <-> float64 paths)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self._iter_modules():
            for name in m._buffers:
                arr = getattr(m, name)
                object.__setattr__(m, name, arr.astype(dtype))
        return self

    def _iter_modules(self):
        yield self
        for child in self._children.values():
            yield from child._iter_modules()

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict):
        own_params = dict(self.named_parameters())
        buffer_owners = {}
        self._collect_buffer_owners("", buffer_owners)
        expected = set(own_params) | set(buffer_owners)
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)
            extra = sorted(got - expected)
            raise ValueError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in own_params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()
            p.grad = None
        for name, (module, attr) in buffer_owners.items():
            arr = np.asarray(state[name])
            if arr.shape != getattr(module, attr).shape:
                raise ValueError(f"shape mismatch for buffer {name}")
            object.__setattr__(module, attr, arr.copy())

    def _collect_buffer_owners(self, prefix, out):
        for name in self._buffers:
            out[prefix + name] = (self, name)
        for cname, child in self._children.items():
            child._collect_buffer_owners(prefix + cname + ".", out)


class Sequential(Module):
    def __init__(self, layers):
        super().__init__()
        self.layer_names = []
        for i, item in enumerate(layers):
            name, module = item if isinstance(item, tuple) else (f"{i}", item)
            setattr(self, name, module)
            self.layer_names.append(name)

    def forward(self, x):
        for name in self.layer_names:
            x = getattr(self, name)(x)
        return x


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, pad: int = 1, rng=None, bias: bool = True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True) if bias else None
        self.stride, self.pad = stride, pad

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / cin)
        self.weight = Tensor(rng.normal(0.0, std, (cin, cout)).astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def forward(self, x):
        return x @ self.weight + self.bias


class BatchNorm2d(Module):
    """Batch normalization over (N, H, W); batch statistics while training,
    running statistics at inference."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        if self.training:
            out, mu, var = batch_norm_train(x, self.gamma, self.beta, self.eps)
            m = self.momentum
            new_mean = ((1 - m) * self.running_mean + m * mu).astype(x.dtype)
            new_var = ((1 - m) * self.running_var + m * var).astype(x.dtype)
            object.__setattr__(self, "running_mean", new_mean)
            object.__setattr__(self, "running_var", new_var)
            return out
        return batch_norm_infer(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)


class ReLU(Module):
    def forward(self, x):
        return x.relu()


class AvgPool2d(Module):
    def __init__(self, k: int = 2):
        super().__init__()
        self.k = k

    def forward(self, x):
        return avg_pool2d(x, self.k)


class GlobalAvgPool(Module):
    def forward(self, x):
        return x.mean(axis=(2, 3))


class Flatten(Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


# -- optimizers --------------------------------------------------------------------


class SGD:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data -= self.lr * g


class Adam:
    """Adam; beta1=0 gives the momentum-free adaptive update."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self._t += 1
        b1, b2 = self.b1, self.b2
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self._t) if b1 else m
            vhat = v / (1 - b2 ** self._t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
