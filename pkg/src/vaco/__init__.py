"""Toy multimodal decoder with task query groups, a gateway attention mask
and per-task feature alignment heads, built on a small numpy autodiff core."""

__version__ = "0.1.0"
