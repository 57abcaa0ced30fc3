"""Shared test setup: single-threaded math for bit-stable results."""

import threadpoolctl

threadpoolctl.threadpool_limits(1)
