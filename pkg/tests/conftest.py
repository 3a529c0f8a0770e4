from __future__ import annotations

import socket

import pytest

# every outbound connection attempt made by a non-live test lands here
NETWORK_ATTEMPTS: list[str] = []


class NetworkBlocked(RuntimeError):
    pass


def _blocked(name):
    def guard(*args, **kwargs):
        NETWORK_ATTEMPTS.append(f"{name}{args[1:2] or args[:1]}")
        raise NetworkBlocked(f"network access attempted via {name}")

    return guard


@pytest.fixture(autouse=True)
def no_network(request, monkeypatch):
    if request.node.get_closest_marker("live"):
        yield
        return
    monkeypatch.setattr(socket.socket, "connect", _blocked("socket.connect"))
    monkeypatch.setattr(socket.socket, "connect_ex", _blocked("socket.connect_ex"))
    monkeypatch.setattr(socket, "create_connection", _blocked("socket.create_connection"))
    monkeypatch.setattr(socket, "getaddrinfo", _blocked("socket.getaddrinfo"))
    yield


def pytest_collection_modifyitems(config, items):
    # the hermeticity check inspects every earlier test, so it goes last
    last = [i for i in items if i.name == "test_hermetic"]
    items[:] = [i for i in items if i.name != "test_hermetic"] + last
