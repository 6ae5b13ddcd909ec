"""Parameter containers with hierarchical names, train/eval mode and state dicts."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from esdnet.errors import CheckpointError
from esdnet.tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that an optimizer updates."""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Base class.  Child modules, parameters and buffers are discovered from attributes.

    Modules reachable twice (weight sharing) are reported once, under the name
    of their first occurrence.
    """

    training: bool = True

    def __init__(self):
        self.training = True
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.forward(x, rng)

    # -- traversal ------------------------------------------------------------

    def named_children(self) -> Iterator[tuple]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value

    def children(self):
        return [m for _, m in self.named_children()]

    def named_modules(self, prefix: str = "", _seen=None) -> Iterator[tuple]:
        seen = set() if _seen is None else _seen
        if id(self) in seen:
            return
        seen.add(id(self))
        yield prefix, self
        for key, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{key}" if prefix else key, seen)

    def _own_parameters(self):
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield key, value

    def named_parameters(self) -> Iterator[tuple]:
        seen = set()
        for mod_name, mod in self.named_modules():
            for key, p in mod._own_parameters():
                if id(p) in seen:
                    continue
                seen.add(id(p))
                yield (f"{mod_name}.{key}" if mod_name else key), p

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple]:
        for mod_name, mod in self.named_modules():
            for key, buf in mod._buffers.items():
                yield (f"{mod_name}.{key}" if mod_name else key), buf

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    # -- mode -----------------------------------------------------------------

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- state ----------------------------------------------------------------

    def _live_state(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, buf in self.named_buffers():
            state[name] = buf
        return state

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Copies of all parameters and buffers, keyed by dotted name."""
        return OrderedDict((k, v.copy()) for k, v in self._live_state().items())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = self._live_state()
        if strict:
            missing = [k for k in own if k not in state]
            unexpected = [k for k in state if k not in own]
            if missing or unexpected:
                raise CheckpointError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, target in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise CheckpointError(f"{name}: stored shape {value.shape} != model shape {target.shape}")
            target[...] = value


class Sequential(Module):
    def __init__(self, *modules: Module):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __len__(self):
        return sum(1 for _ in self.named_children())

    def __iter__(self):
        return iter(self.children())

    def __getitem__(self, idx):
        return self.children()[idx]

    def forward(self, x, rng=None):
        for m in self.children():
            x = m(x, rng)
        return x


class ModuleList(Module):
    """Indexable container; does not define ``forward``."""

    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self)), module)

    def __len__(self):
        return sum(1 for _ in self.named_children())

    def __iter__(self):
        return iter(self.children())

    def __getitem__(self, idx):
        return self.children()[idx]
