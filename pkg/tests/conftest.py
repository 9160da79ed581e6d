import json

import pytest

from apifuzz.bookshop import BookshopApp, bookshop_spec
from apifuzz.http_driver import InProcessTarget
from apifuzz.sampling import build_sampling_spec
from apifuzz.semantic_model import infer_model


@pytest.fixture(scope="session")
def bookshop_ir():
    return bookshop_spec()


@pytest.fixture(scope="session")
def bookshop_model(bookshop_ir):
    return infer_model(bookshop_ir)


@pytest.fixture(scope="session")
def bookshop_sampling(bookshop_ir, bookshop_model):
    return build_sampling_spec(bookshop_ir, bookshop_model)


@pytest.fixture
def app():
    return BookshopApp()


@pytest.fixture
def target(app):
    t = InProcessTarget(app)
    yield t
    t.close()


def make_target(toggles=(), **kwargs):
    return InProcessTarget(BookshopApp(toggles=toggles, **kwargs))


def minimal_spec_doc(paths: dict, schemas: dict | None = None) -> bytes:
    doc = {
        "openapi": "3.0.3",
        "info": {"title": "mini", "version": "1.0.0"},
        "paths": paths,
    }
    if schemas:
        doc["components"] = {"schemas": schemas}
    return json.dumps(doc).encode("utf-8")


def json_response(schema: dict, description: str = "ok") -> dict:
    return {"description": description,
            "content": {"application/json": {"schema": schema}}}
