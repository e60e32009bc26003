import socket

import pytest
import torch

torch.set_num_threads(1)

NETWORK = {"guarded": False, "attempts": []}
CRITERIA = {}


def _blocked(*args, **kwargs):
    NETWORK["attempts"].append(args)
    raise OSError("network access is disabled in the test suite")


@pytest.fixture(scope="session", autouse=True)
def no_network():
    """The suite is hermetic: any outbound connection fails and is recorded."""
    mp = pytest.MonkeyPatch()
    mp.setattr(socket.socket, "connect", _blocked)
    mp.setattr(socket.socket, "connect_ex", _blocked)
    mp.setattr(socket, "create_connection", _blocked)
    mp.setattr(socket, "getaddrinfo", _blocked)
    NETWORK["guarded"] = True
    yield NETWORK
    mp.undo()


def record_criterion(number, passed, detail):
    CRITERIA[number] = (passed, detail)
    print(f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
