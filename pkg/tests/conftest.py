from __future__ import annotations

import logging

import pytest
from fastapi.testclient import TestClient

from surveychat.backend import MockBackend
from surveychat.config import SecretsBundle, bundled_study_path, load_study_config
from surveychat.service import create_app
from surveychat.session import SessionManager
from surveychat.store import TranscriptStore

import helpers
from helpers import SECRET_ADMIN_TOKEN, SECRET_API_KEY

# Every log record emitted anywhere during the whole test session, kept for
# the secret-hygiene sweep in the acceptance suite.
CAPTURED_LOG_LINES: list[str] = []


class _SessionRecorder(logging.Handler):
    def emit(self, record: logging.LogRecord) -> None:
        try:
            CAPTURED_LOG_LINES.append(self.format(record))
        except Exception:
            pass


@pytest.fixture(scope="session", autouse=True)
def _record_all_logs():
    handler = _SessionRecorder(level=logging.DEBUG)
    handler.setFormatter(logging.Formatter("%(name)s %(levelname)s %(message)s"))
    root = logging.getLogger()
    previous_level = root.level
    root.addHandler(handler)
    root.setLevel(logging.DEBUG)
    yield
    root.removeHandler(handler)
    root.setLevel(previous_level)


@pytest.fixture(autouse=True)
def _clean_secret_env(monkeypatch):
    monkeypatch.delenv("SURVEYCHAT_API_KEY", raising=False)
    monkeypatch.delenv("SURVEYCHAT_ADMIN_TOKEN", raising=False)
    monkeypatch.delenv("SURVEYCHAT_FAULT_HOOK", raising=False)


@pytest.fixture(scope="session")
def poem_config():
    return load_study_config(bundled_study_path("poem_study"))


@pytest.fixture
def secrets_bundle():
    return SecretsBundle(api_key=SECRET_API_KEY, admin_token=SECRET_ADMIN_TOKEN)


@pytest.fixture
def store(tmp_path):
    store = TranscriptStore(tmp_path / "transcripts.db")
    yield store
    store.close()


@pytest.fixture
def manager(poem_config, store):
    return SessionManager(poem_config, store, MockBackend())


@pytest.fixture
def client(poem_config, secrets_bundle, store):
    app = create_app(poem_config, secrets_bundle, store, MockBackend(),
                     allow_origins=["https://survey.example.edu"])
    with TestClient(app) as test_client:
        yield test_client


def pytest_sessionfinish(session, exitstatus):
    """Final secret-hygiene sweep over everything any test caused to be logged."""
    lines = CAPTURED_LOG_LINES + helpers.DAEMON_OUTPUT
    leaked = [line for line in lines
              if SECRET_API_KEY in line or SECRET_ADMIN_TOKEN in line]
    print(f"\nSECRET HYGIENE SWEEP: scanned {len(lines)} captured log chunks: "
          f"{'FAIL' if leaked else 'PASS'}")
    if leaked:
        for line in leaked[:10]:
            print(f"  leaked: {line!r}")
        session.exitstatus = 1
