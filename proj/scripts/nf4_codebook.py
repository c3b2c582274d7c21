#!/usr/bin/env python3
"""Reference generator for the 16-level normal-float codebook.

Levels sit at quantiles of the standard normal: 8 on the positive side and 7
on the negative side of an asymmetric grid, plus an exact zero, normalized so
the largest magnitude is 1. The C++ implementation computes the same table at
runtime; the test suite freezes the values printed here.
"""
import numpy as np
from scipy.stats import norm

offset = 0.5 * ((1 - 1 / (2 * 15)) + (1 - 1 / (2 * 16)))
pos = norm.ppf(np.linspace(offset, 0.5, 9)[:-1])
neg = -norm.ppf(np.linspace(offset, 0.5, 8)[:-1])
levels = np.sort(np.concatenate([pos, [0.0], neg]))
levels /= levels.max()
for v in levels:
    print(f"{v:.17g}")
