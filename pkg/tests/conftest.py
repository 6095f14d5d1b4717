import pytest

from ltqp_guard.harness import ScenarioServer, manifest_from_dict


@pytest.fixture
def serve():
    """Start a ScenarioServer from a manifest dict; stopped after the test."""
    started = []

    def start(data, directory=None, port=0):
        server = ScenarioServer(manifest_from_dict(data, directory), port)
        started.append(server)
        return server

    yield start
    for server in started:
        server.stop()


def turtle(body, media_type="text/turtle"):
    return {"type": "static", "body": body, "mediaType": media_type}
