"""Walk through the embedding cache: fills, life-span expiry, and eviction.

Run: python demos/cache_walkthrough.py
"""

import numpy as np

from minigraph.hec import Hec

h = Hec(capacity=3, dim=2, ls=2)


def show(step):
    print(f"{step:<32} resident (tag: age) = {h.resident()}")


print(h.store([10, 11], np.ones((2, 2))))
show("stored 10, 11")
h.age_tick()
print(h.store([12], np.full((1, 2), 2.0)))
show("tick, stored 12")

# cache is full: the next new tag evicts the oldest line (10 and 11 tie at
# age 1, so the larger tag goes first)
h.age_tick()
print(h.store([13], np.full((1, 2), 3.0)))
show("tick, stored 13 (evicts)")

# refreshing a resident tag resets its age without taking a new line
print(h.store([10], np.full((1, 2), 9.0)))
show("re-stored 10")

for _ in range(2):
    h.age_tick()
show("two ticks later")
look = h.search([10, 12, 13])
print("hits for 10, 12, 13:", look.hits.tolist())

# lines past their life-span are reused before any live line is evicted
print(h.store([20], np.zeros((1, 2))))
show("stored 20 into an expired line")
