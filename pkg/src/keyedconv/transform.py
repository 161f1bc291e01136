"""Keyed pixel shuffling: the acquisition-time transform and its inverse.

``shuffle`` stands in for a capture device that digitizes pixels in keyed
order, so the pipeline downstream of it never needs to see the plain image.
Both directions are pure gathers; values move, bits do not change.
"""

from __future__ import annotations

from .keys import PermKey, invert_key
from .tensor_ops import Tensor, gather_spatial

__all__ = ["shuffle", "unshuffle"]


def shuffle(image: Tensor, key: PermKey) -> Tensor:
    """Apply the same spatial permutation to every channel of the image."""
    return gather_spatial(image, key)


def unshuffle(image: Tensor, key: PermKey) -> Tensor:
    """Invert ``shuffle`` with the same key: unshuffle(shuffle(x, k), k) == x."""
    return gather_spatial(image, invert_key(key))
