"""Parameter containers.

A :class:`Module` finds its trainable tensors, buffers and children by
walking instance attributes. Names are slash-joined paths, which are also
the tensor names used in checkpoints.
"""
from __future__ import annotations

import numpy as np

from .numerics import Tensor


class Module:
    _buffers: tuple = ()

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + "/")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}/{i}/")

    def named_buffers(self, prefix=""):
        for key in self._buffers:
            yield f"{prefix}{key}", getattr(self, key)
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value.named_buffers(path + "/")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{path}/{i}/")

    def parameters(self, prefix=""):
        return dict(self.named_parameters(prefix))

    def state_dict(self, prefix=""):
        state = {name: np.array(t.data) for name, t in self.named_parameters(prefix)}
        for name, buf in self.named_buffers(prefix):
            state[name] = np.array(buf)
        return state

    def load_state_dict(self, state, prefix=""):
        for name, t in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing tensor {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {t.shape}")
            t.data = arr.astype(t.dtype)
        for name, _ in list(self.named_buffers(prefix)):
            if name not in state:
                raise KeyError(f"missing buffer {name!r}")
            obj, attr = self._locate(name[len(prefix):])
            obj._set_buffer(attr, np.asarray(state[name]))

    def _locate(self, rel):
        parts = rel.split("/")
        obj = self
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        return obj, parts[-1]

    def _set_buffer(self, attr, value):
        current = getattr(self, attr)
        setattr(self, attr, np.asarray(value).astype(np.asarray(current).dtype).reshape(np.shape(current)))

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def cast(self, dtype):
        """Cast every parameter to ``dtype`` in place (buffers keep theirs)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self
