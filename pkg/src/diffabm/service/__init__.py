from .app import create_app, package_version

__all__ = ["create_app", "package_version"]
