"""agentmesh: principal/gateway orchestration of distributed agent resources."""

__version__ = "0.1.0"
