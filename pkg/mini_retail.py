"""
Mini-retail domain: users, orders and a small product catalog.

Tool schemas are declared in the suite file; this module only binds their
behaviour. Every function receives a private copy of the collections and
raises ToolError for domain failures.
"""

from typing import Any, Dict

from environment import ToolError, register_tool

Collections = Dict[str, Dict[str, Any]]


def _order(collections: Collections, order_id: str) -> Dict[str, Any]:
    order = collections.get("orders", {}).get(order_id)
    if order is None:
        raise ToolError(f"order not found: {order_id}")
    return order


@register_tool("find_user")
def find_user(collections: Collections, email: str) -> Dict[str, Any]:
    wanted = email.strip().lower()
    for user_id in sorted(collections.get("users", {})):
        user = collections["users"][user_id]
        if user.get("email", "").lower() == wanted:
            return {"user_id": user_id, "name": user.get("name", "")}
    raise ToolError(f"user not found: {email}")


@register_tool("get_order")
def get_order(collections: Collections, order_id: str) -> Dict[str, Any]:
    return _order(collections, order_id)


@register_tool("get_product")
def get_product(collections: Collections, product_id: str) -> Dict[str, Any]:
    product = collections.get("products", {}).get(product_id)
    if product is None:
        raise ToolError(f"product not found: {product_id}")
    return product


@register_tool("cancel_order")
def cancel_order(collections: Collections, order_id: str) -> Dict[str, Any]:
    order = _order(collections, order_id)
    if order.get("status") != "pending":
        raise ToolError(f"order {order_id} cannot be cancelled: status is '{order.get('status')}'")
    order["status"] = "cancelled"
    return {"order_id": order_id, "status": "cancelled"}


@register_tool("exchange_item")
def exchange_item(collections: Collections, order_id: str, item_id: str, new_item_id: str) -> Dict[str, Any]:
    # Delivered status is a policy rule only; the tool does not check it.
    order = _order(collections, order_id)
    item = next((i for i in order.get("items", []) if i.get("item_id") == item_id), None)
    if item is None:
        raise ToolError(f"item {item_id} is not part of order {order_id}")
    product = collections.get("products", {}).get(item.get("product_id"), {})
    variant = product.get("variants", {}).get(new_item_id)
    if variant is None:
        raise ToolError(f"item {new_item_id} is not a variant of product {item.get('product_id')}")
    if not variant.get("available", False):
        raise ToolError(f"item {new_item_id} is not available")
    if new_item_id == item_id:
        raise ToolError("new item must differ from the current item")
    order["status"] = "exchange requested"
    order["exchange"] = {"item_id": item_id, "new_item_id": new_item_id}
    return {"order_id": order_id, "status": "exchange requested", "item_id": item_id, "new_item_id": new_item_id}


@register_tool("transfer_to_human")
def transfer_to_human(collections: Collections, summary: str) -> Dict[str, Any]:
    return {"status": "transferred", "summary": summary}
