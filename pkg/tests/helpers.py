"""Finite-difference oracle shared by the gradient tests."""
import numpy as np

H = 1e-5


def numerical_grad(f, x, h=H):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x``
    (perturbed in place, restored afterwards)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        g[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


# acceptance verdict lines, echoed again in the pytest terminal summary
VERDICTS: list[str] = []


def verdict(number, checks, detail=""):
    """Record and print one PASS/FAIL line for an acceptance criterion, then
    assert every named sub-check."""
    failed = [name for name, ok in checks.items() if not ok]
    line = f"criterion {number}: {'FAIL' if failed else 'PASS'}"
    if detail:
        line += f"  {detail}"
    if failed:
        line += f"  [failed: {', '.join(failed)}]"
    VERDICTS.append(line)
    print(line)
    assert not failed, line
