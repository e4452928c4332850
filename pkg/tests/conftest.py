import random

import pytest

from halp.netspec import LayerSpec, NetworkError, NetworkSpec

_REPORT: list[str] = []


def random_net(rng: random.Random, max_height: int = 32, min_layers: int = 2,
               max_layers: int = 6, max_channels: int = 3) -> NetworkSpec:
    """Small conv/pool stack; padding stays below the kernel so every row is read."""
    while True:
        height = rng.randint(6, max_height)
        c = rng.randint(1, max_channels)
        layers = []
        h = height
        for _ in range(rng.randint(min_layers, max_layers)):
            if rng.random() < 0.3:
                k = rng.randint(2, 3)
                layer = LayerSpec("maxpool", k, rng.randint(1, k), rng.randint(0, k - 1), c, c)
            else:
                k = rng.randint(1, 5)
                c_out = rng.randint(1, max_channels)
                layer = LayerSpec("conv", k, rng.randint(1, min(k, 2)), rng.randint(0, k - 1),
                                  c, c_out, relu=rng.random() < 0.5)
            if layer.k > h + 2 * layer.p:
                break
            h = (h + 2 * layer.p - layer.k) // layer.s + 1
            if h < 1:
                break
            layers.append(layer)
            c = layer.c_out
        if len(layers) >= min_layers:
            try:
                return NetworkSpec("toy", height, layers[0].c_in, tuple(layers))
            except NetworkError:
                continue


@pytest.fixture
def acceptance_report():
    def record(number: int, ok: bool, detail: str):
        _REPORT.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_REPORT, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
