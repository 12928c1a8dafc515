import pathlib

import pytest

from tumbler import ec

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


def load_vectors(path=FIXTURES / "vectors.txt") -> dict[str, int]:
    """Parse the pinned `key = hexvalue` vector file."""
    vectors = {}
    for line in pathlib.Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        vectors[key.strip()] = int(value.strip(), 16)
    return vectors


@pytest.fixture(scope="session")
def vectors() -> dict[str, int]:
    return load_vectors()


@pytest.fixture(scope="session")
def toy():
    return ec.TOY_CURVE


@pytest.fixture(scope="session")
def secp():
    return ec.SECP256K1


@pytest.fixture(scope="session")
def toy_points(toy):
    """Every point of the toy curve, found by exhaustive search."""
    pts = [None]
    for x in range(toy.p):
        rhs = (x * x * x + toy.a * x + toy.b) % toy.p
        for y in range(toy.p):
            if y * y % toy.p == rhs:
                pts.append((x, y))
    return pts


def naive_mul(curve, k, P):
    """Oracle scalar multiplication by repeated affine addition."""
    acc = None
    for _ in range(k):
        acc = curve.add(acc, P)
    return acc
