#!/usr/bin/env python3
"""Regenerates the bundled topology fixtures.

Latencies follow great-circle distance between the listed sites
(5 ms floor plus 1 ms per 100 km); bandwidths and compute times are
drawn from a fixed seed. The output is committed, so this script only
needs to be rerun when the site lists change.
"""
import json
import math
import random
from pathlib import Path

GAIA = [
    ("virginia", 38.13, -78.45), ("california", 37.35, -121.96),
    ("oregon", 46.15, -123.88), ("ireland", 53.35, -6.26),
    ("frankfurt", 50.11, 8.68), ("tokyo", 35.41, 139.42),
    ("seoul", 37.56, 126.98), ("singapore", 1.37, 103.80),
    ("sydney", -33.86, 151.20), ("mumbai", 19.08, 72.88),
    ("sao_paulo", -23.34, -46.38),
]

NWS = [
    ("seattle", 47.61, -122.33), ("portland", 45.52, -122.68),
    ("san_francisco", 37.77, -122.42), ("los_angeles", 34.05, -118.24),
    ("san_diego", 32.72, -117.16), ("las_vegas", 36.17, -115.14),
    ("phoenix", 33.45, -112.07), ("salt_lake_city", 40.76, -111.89),
    ("denver", 39.74, -104.99), ("dallas", 32.78, -96.80),
    ("houston", 29.76, -95.37), ("kansas_city", 39.10, -94.58),
    ("minneapolis", 44.98, -93.27), ("chicago", 41.88, -87.63),
    ("st_louis", 38.63, -90.20), ("atlanta", 33.75, -84.39),
    ("miami", 25.76, -80.19), ("washington", 38.91, -77.04),
    ("new_york", 40.71, -74.01), ("boston", 42.36, -71.06),
    ("toronto", 43.65, -79.38), ("montreal", 45.50, -73.57),
]


def distance_km(a, b):
    lat1, lon1, lat2, lon2 = map(math.radians, (a[1], a[2], b[1], b[2]))
    h = (math.sin((lat2 - lat1) / 2) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2)
    return 2 * 6371.0 * math.asin(math.sqrt(h))


def latency(a, b):
    return round(0.005 + distance_km(a, b) / 100000.0, 6)


def build(sites, pairs, seed):
    rng = random.Random(seed)
    silos = [{"id": i, "name": s[0], "compute_time_s": round(rng.uniform(0.02, 0.06), 4)}
             for i, s in enumerate(sites)]
    links = []
    for i, j in pairs:
        links.append({"src": i, "dst": j, "latency_s": latency(sites[i], sites[j]),
                      "bandwidth_Bps": float(rng.choice([1.25e7, 2.5e7, 6.25e7, 1.25e8]))})
    return {"undirected": True, "silos": silos, "links": links}


def knn_pairs(sites, k):
    n = len(sites)
    pairs = set()
    for i in range(n):
        order = sorted((distance_km(sites[i], sites[j]), j) for j in range(n) if j != i)
        for _, j in order[:k]:
            pairs.add((min(i, j), max(i, j)))
    # Join components by their closest pair until the graph is connected.
    while True:
        comp = list(range(n))

        def find(x):
            while comp[x] != x:
                x = comp[x]
            return x

        for i, j in pairs:
            comp[find(i)] = find(j)
        roots = {find(i) for i in range(n)}
        if len(roots) == 1:
            return sorted(pairs)
        best = min((distance_km(sites[i], sites[j]), i, j)
                   for i in range(n) for j in range(i + 1, n) if find(i) != find(j))
        pairs.add((best[1], best[2]))


def main():
    out = Path(__file__).resolve().parent.parent / "fixtures"
    gaia_pairs = [(i, j) for i in range(len(GAIA)) for j in range(i + 1, len(GAIA))]
    (out / "gaia11.json").write_text(json.dumps(build(GAIA, gaia_pairs, 11), indent=1) + "\n")
    (out / "nws22.json").write_text(json.dumps(build(NWS, knn_pairs(NWS, 3), 22), indent=1) + "\n")


if __name__ == "__main__":
    main()
