"""Layer containers over the tensor engine.

A Module owns named parameters (Tensors with requires_grad), named buffers
(plain numpy arrays such as batch-norm running statistics), and child
modules. Parameter names are dotted paths mirroring attribute structure;
this namespace is what the weight checkpoints store.

Training mode is a recursive flag (train()/eval()); it only affects batch
norm. Eval-mode forward is reentrant; training mutates running statistics
and is single-threaded per model instance.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = False

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def param(self, name: str, data, requires_grad: bool = True) -> Tensor:
        t = data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)
        t.requires_grad = requires_grad
        self._params[name] = t
        return t

    def buffer(self, name: str, data) -> np.ndarray:
        arr = np.asarray(data, dtype=np.float32)
        self._buffers[name] = arr
        return arr

    def named_params(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_params(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def params(self):
        for _, p in self.named_params():
            yield p

    def train(self, flag: bool = True):
        self.training = flag
        for child in self._children.values():
            child.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    """Sequential container registering children by index."""

    def __init__(self, modules=()):
        super().__init__()
        self._list: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, m: Module):
        self._children[str(len(self._list))] = m
        self._list.append(m)
        return self

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]

    def forward(self, x):
        for m in self._list:
            x = m(x)
        return x


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


class Conv2d(Module):
    """Convolution layer; Kaiming-uniform fan-in init, zero bias."""

    def __init__(self, cin, cout, kernel, rng, stride=1, padding=None,
                 groups=1, bias=True):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        fan_in = (cin // groups) * kernel * kernel
        self.w = self.param("w", kaiming_uniform(rng, (cout, cin // groups, kernel, kernel), fan_in))
        self.b = self.param("b", np.zeros(cout, np.float32)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride,
                        padding=self.padding, groups=self.groups)


class BatchNorm2d(Module):
    def __init__(self, c, eps=1e-5, momentum=0.03):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = self.param("gamma", np.ones(c, np.float32))
        self.beta = self.param("beta", np.zeros(c, np.float32))
        self.running_mean = self.buffer("running_mean", np.zeros(c, np.float32))
        self.running_var = self.buffer("running_var", np.ones(c, np.float32))

    def forward(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training=self.training,
                            momentum=self.momentum, eps=self.eps)


class LayerNorm2d(Module):
    """Channel-axis layer norm for NCHW maps."""

    def __init__(self, c, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.gamma = self.param("gamma", np.ones(c, np.float32))
        self.beta = self.param("beta", np.zeros(c, np.float32))

    def forward(self, x):
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)


class ConvBNAct(Module):
    """conv (no bias) -> batch norm -> SiLU; the workhorse fusion unit."""

    def __init__(self, cin, cout, kernel, rng, stride=1, groups=1):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, rng, stride=stride,
                           groups=groups, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return T.silu(self.bn(self.conv(x)))
