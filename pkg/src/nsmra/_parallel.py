"""Order-preserving parallel map used by the per-region and per-grid-point loops."""

from concurrent.futures import ThreadPoolExecutor


def pmap(fn, items, n_jobs=1):
    """Apply ``fn`` to ``items``; results come back in input order whatever the schedule."""
    items = list(items)
    if n_jobs is None or n_jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, items))
