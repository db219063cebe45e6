"""Mock downstream servers and fixtures for exercising the mediator."""
from .fixture import ResourceFixture, generate_fixture
from .graph import GraphQueryError, PropertyGraph
from .servers import GraphServer, ResourceServer
from .sync import DESK_SHAPE, FULL_SHAPE, SINGLE_NAMESPACE_SHAPE, SHAPES, SyncShape, make_sync_blueprint

__all__ = [
    "DESK_SHAPE", "FULL_SHAPE", "GraphQueryError", "GraphServer", "PropertyGraph",
    "ResourceFixture", "ResourceServer", "SHAPES", "SINGLE_NAMESPACE_SHAPE", "SyncShape",
    "generate_fixture", "make_sync_blueprint",
]
