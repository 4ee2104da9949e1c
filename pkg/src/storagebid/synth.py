"""Seeded synthetic market data.

Hourly prices built from two persistent day-scale factors plus noise and
occasional evening spikes:

level
    an AR(1) shift of the whole day's price level. It moves prices a lot and
    is easy to predict from the trailing day, but a flat shift is worthless
    to storage.
spread
    an AR(1) multiplier on the intraday shape (valley depth and peak
    height). It decides whether a round trip clears the operating cost, and
    it is visible in the load channel's daily amplitude.

Real-time price adds noise and rare spikes on top; the day-ahead channel
carries yesterday's smooth component, so the factors are recoverable from a
trailing feature window. Everything derives from the seed.
"""

from __future__ import annotations

from datetime import datetime, timedelta

import numpy as np

from .domain import PriceSeries

__all__ = ["synthetic_price_series"]


def _ar1(days: int, phi: float, sd: float, rng) -> np.ndarray:
    x = np.empty(days)
    x[0] = rng.normal(0.0, sd / np.sqrt(1.0 - phi * phi))
    for d in range(1, days):
        x[d] = phi * x[d - 1] + rng.normal(0.0, sd)
    return x


def synthetic_price_series(
    days: int,
    seed: int = 0,
    start: datetime | None = None,
    base_price: float = 40.0,
    shape_amplitude: float = 16.0,
    level_sd: float = 7.0,
    spread_sd: float = 0.33,
    noise_sd: float = 3.0,
    spike_rate: float = 0.12,
    spike_scale: float = 90.0,
) -> PriceSeries:
    if days < 1:
        raise ValueError("need at least one day")
    rng = np.random.default_rng(seed)
    start = start or datetime(2024, 1, 1)
    n = days * 24
    hours = np.arange(n) % 24
    day = np.arange(n) // 24

    level = _ar1(days, 0.85, level_sd, rng)
    spread = np.clip(1.0 + _ar1(days, 0.8, spread_sd, rng), 0.35, 2.3)

    shape = np.sin((hours - 10.0) / 24.0 * 2.0 * np.pi)
    load = (
        600.0
        + (60.0 + 55.0 * spread[day]) * np.sin((hours - 9.0) / 24.0 * 2.0 * np.pi)
        + 35.0 * np.sin(np.arange(n) / (24.0 * 7.0) * 2.0 * np.pi)
        + rng.normal(0.0, 15.0, n)
    )

    smooth = base_price + level[day] + shape_amplitude * spread[day] * shape
    rtp = smooth + rng.normal(0.0, noise_sd, n)

    evening = (hours >= 17) & (hours <= 20)
    p_spike = np.where(evening, spike_rate / 4.0, 0.003)
    rtp = rtp + (rng.random(n) < p_spike) * rng.exponential(spike_scale, n)

    # day-ahead: yesterday's smooth component, a lagging but honest forecast
    lag_day = np.maximum(day - 1, 0)
    dap = base_price + level[lag_day] + shape_amplitude * spread[lag_day] * shape

    rtp = np.maximum(rtp, 1.0)
    dap = np.maximum(dap, 1.0)
    stamps = tuple(start + timedelta(hours=int(k)) for k in range(n))
    return PriceSeries(timestamps=stamps, rtp=rtp, dap=dap, load=load)
