"""Minimal module system: parameter registration, naming, train/eval mode."""

from __future__ import annotations

from .tensor import Parameter


class Module:
    """Container tracking parameters and child modules in definition order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, array) -> None:
        """Track non-learnable state (updated in place, saved in checkpoints)."""
        self._buffers[key] = array
        object.__setattr__(self, key, array)

    def named_parameters(self, prefix: str = ""):
        """Yield (dotted path, parameter) pairs; paths are stamped on params."""
        for key, p in self._params.items():
            name = f"{prefix}{key}"
            p.name = name
            yield name, p
        for key, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{key}.")

    def named_buffers(self, prefix: str = ""):
        for key, arr in self._buffers.items():
            yield f"{prefix}{key}", arr
        for key, child in self._children.items():
            yield from child.named_buffers(prefix=f"{prefix}{key}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def modules(self, prefix: str = ""):
        yield prefix.rstrip("."), self
        for key, child in self._children.items():
            yield from child.modules(prefix=f"{prefix}{key}.")

    def train(self) -> "Module":
        for _, m in self.modules():
            object.__setattr__(m, "training", True)
        return self

    def eval(self) -> "Module":
        for _, m in self.modules():
            object.__setattr__(m, "training", False)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    """Children kept under numeric keys so parameter paths stay stable."""

    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]
