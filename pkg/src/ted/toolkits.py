"""Toy tool sets for the built-in reference agent.

A toolkit factory returns ``(registry, schemas)`` with fresh state, so every
trial starts from the same device state.
"""

from __future__ import annotations

import importlib
from typing import Any, Callable


def _fn_schema(name: str, description: str, properties: dict[str, Any], required: list[str]) -> dict[str, Any]:
    return {
        "type": "function",
        "function": {
            "name": name,
            "description": description,
            "parameters": {"type": "object", "properties": properties, "required": required},
        },
    }


def phone_settings() -> tuple[dict[str, Callable[..., Any]], list[dict[str, Any]]]:
    """Wifi / location / low-battery-mode device with a location lookup."""
    state = {"wifi": False, "location_service": False, "low_battery_mode": True, "city": "Cupertino"}

    def set_low_battery_mode_status(on: bool) -> str:
        state["low_battery_mode"] = bool(on)
        return f"low battery mode {'enabled' if on else 'disabled'}"

    def set_wifi_status(on: bool) -> str:
        if on and state["low_battery_mode"]:
            raise PermissionError("cannot enable wifi while low battery mode is on")
        state["wifi"] = bool(on)
        return f"wifi {'enabled' if on else 'disabled'}"

    def set_location_service_status(on: bool) -> str:
        if on and state["low_battery_mode"]:
            raise PermissionError("cannot enable location services while low battery mode is on")
        state["location_service"] = bool(on)
        return f"location service {'enabled' if on else 'disabled'}"

    def get_current_location() -> dict[str, Any]:
        if not (state["wifi"] and state["location_service"]):
            raise ConnectionError("location unavailable: wifi and location services must be on")
        return {"city": state["city"]}

    registry = {
        "set_low_battery_mode_status": set_low_battery_mode_status,
        "set_wifi_status": set_wifi_status,
        "set_location_service_status": set_location_service_status,
        "get_current_location": get_current_location,
    }
    on = {"on": {"type": "boolean"}}
    schemas = [
        _fn_schema("set_low_battery_mode_status", "Turn low battery mode on or off.", on, ["on"]),
        _fn_schema("set_wifi_status", "Turn wifi on or off.", on, ["on"]),
        _fn_schema("set_location_service_status", "Turn location services on or off.", on, ["on"]),
        _fn_schema("get_current_location", "Return the device's current city.", {}, []),
    ]
    return registry, schemas


def load_toolkit(spec: str) -> Callable[[], tuple[dict[str, Callable[..., Any]], list[dict[str, Any]]]]:
    """Resolve ``"module:attr"`` (or a built-in name) to a toolkit factory."""
    if spec in BUILTIN:
        return BUILTIN[spec]
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise ValueError(f"toolkit spec must be 'module:attr' or one of {sorted(BUILTIN)}, got {spec!r}")
    return getattr(importlib.import_module(module_name), attr)


BUILTIN = {"phone_settings": phone_settings}
