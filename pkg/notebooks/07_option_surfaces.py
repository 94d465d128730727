"""
From option quotes to implied-volatility surfaces
=================================================

Quotes are inverted to implied volatilities and mapped onto the unit square
(days to expiry by log-moneyness).  The result feeds the same pipeline.
"""

import numpy as np

from sepsurf.data import OptionDomain, bs_call_price, implied_vol, ingest_options

rng = np.random.default_rng(5)
rows = []
for day in range(3):
    spot = 100 * np.exp(0.01 * day)
    for _ in range(25):
        tau_days = rng.uniform(14, 365)
        strike = spot * np.exp(rng.uniform(-0.4, 0.4))
        vol = 0.2 + 0.1 * np.log(strike / spot) ** 2
        price = bs_call_price(spot, strike, tau_days / 365, 0.01, vol)
        rows.append({"surface_id": f"day{day}", "spot": spot, "strike": strike, "tau_days": tau_days,
                     "rate": 0.01, "price": price})

print("round trip:", implied_vol(bs_call_price(100, 105, 0.5, 0.01, 0.3), 100, 105, 0.5, 0.01))
ds = ingest_options(rows, OptionDomain(), log_iv=False)
print(f"{len(ds)} quotes on {ds.n_surfaces} surfaces, labels {ds.meta['surface_labels']}")
print("implied vol range:", ds.y.min().round(4), ds.y.max().round(4))
