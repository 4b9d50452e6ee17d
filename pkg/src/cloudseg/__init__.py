"""Lidar cloud segmentation with a from-scratch autodiff engine.

Submodules: ``tensor`` (autodiff), ``layers``, ``lidar`` (synthetic days and
the slope baseline), ``preprocessing``, ``models``, ``training``,
``formats``, ``render`` and ``cli``.
"""

__version__ = "0.1.0"
