"""
Test Strategies Module

Tests for the text action grammar, the tool-calling backbone with its
repair round, and FACT's follow-up-first rules.
"""

import json
import os
import unittest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SUITE_PATH = os.path.join(ROOT, "data", "mini_retail_suite.json")

IDENTITY_QUESTION = ("Before I can help with that, I need to verify your identity. "
                     "Could you please provide your email?")


def text_action(name, arguments, thought="ok"):
    return f"Thought: {thought}\nAction:\n```json\n{json.dumps({'name': name, 'arguments': arguments})}\n```"


def native_call(name, arguments, call_id="c1", content=""):
    return {"role": "assistant", "content": content,
            "tool_calls": [{"id": call_id, "name": name, "arguments": arguments}]}


def assistant(*replies):
    from llm_integration import make_scripted_provider

    return {"assistant": make_scripted_provider({"entries": [{"reply": r} for r in replies]}, name="assistant")}


class StrategyTestCase(unittest.TestCase):
    """Loads the mini-retail suite once for strategy tests."""

    @classmethod
    def setUpClass(cls):
        from environment import load_suite
        cls.suite = load_suite(SUITE_PATH)

    def context(self, strategy, *messages):
        from models import ChatMessage

        context = strategy.new_context(self.suite.policy, self.suite.tools, seed=11)
        for message in messages:
            context.history.append(message if isinstance(message, ChatMessage) else ChatMessage(**message))
        return context


class TestTextActions(unittest.TestCase):
    """Tests for the Thought/Action grammar."""

    def test_parse(self):
        """Test that reasoning, name and arguments are extracted."""
        from strategies import parse_text_action

        reasoning, name, arguments = parse_text_action(text_action("get_order", {"order_id": "o1"}, "Look it up."))

        self.assertEqual((reasoning, name, arguments), ("Look it up.", "get_order", {"order_id": "o1"}))

    def test_render_parses_back(self):
        """Test that a rendered action is accepted by the parser."""
        from strategies import parse_text_action, render_text_action

        text = render_text_action("Check first.", "get_product", {"product_id": "p_chair"})

        self.assertEqual(parse_text_action(text), ("Check first.", "get_product", {"product_id": "p_chair"}))

    def test_parse_errors(self):
        """Test that malformed actions raise DecodeError."""
        from strategies import DecodeError, parse_text_action

        cases = [
            "Thought: no action here",
            "Action:\n```json\n{not json}\n```",
            "Action:\n```json\n{\"arguments\": {}}\n```",
            "Action:\n```json\n{\"name\": \"x\", \"arguments\": [1]}\n```",
        ]
        for text in cases:
            with self.subTest(text=text):
                with self.assertRaises(DecodeError):
                    parse_text_action(text)

    def test_text_transcript(self):
        """Test that native tool traffic becomes text turns."""
        from models import ChatMessage, ToolCall
        from strategies import parse_text_action, to_text_transcript

        messages = [
            ChatMessage(role="system", content="sys"),
            ChatMessage(role="assistant", content="Hi"),
            ChatMessage(role="assistant", content="",
                        tool_calls=[ToolCall(name="get_order", arguments={"order_id": "o1"}, id="c1")]),
            ChatMessage(role="tool", content="{\"status\": \"pending\"}", tool_call_id="c1"),
        ]

        converted = to_text_transcript(messages)

        self.assertEqual([m.role for m in converted], ["system", "assistant", "assistant", "user"])
        self.assertEqual(parse_text_action(converted[1].content)[1:], ("respond", {"content": "Hi"}))
        self.assertEqual(parse_text_action(converted[2].content)[1:], ("get_order", {"order_id": "o1"}))
        self.assertEqual(converted[3].content, "Observation: {\"status\": \"pending\"}")

    def test_line_items(self):
        """Test the '- item' sub-agent format and its None literal."""
        from strategies import parse_line_items

        self.assertEqual(parse_line_items("- a\n- b\n\nnoise"), ["a", "b"])
        self.assertIsNone(parse_line_items(" None. "))
        with self.assertRaises(ValueError):
            parse_line_items("I think the rules are a and b")


class TestToolCallingBackbone(StrategyTestCase):
    """Tests for Function-Calling and ReAct decoding."""

    def test_native_tool_call(self):
        """Test that a native tool call becomes a ToolCall with its id."""
        from models import ToolCall
        from strategies import FunctionCallingStrategy, decide

        strategy = FunctionCallingStrategy()
        context = self.context(strategy, {"role": "user", "content": "my email is jane@example.com"})

        action = decide(strategy, context, assistant(native_call("find_user", {"email": "jane@example.com"})))

        self.assertEqual(action, ToolCall(name="find_user", arguments={"email": "jane@example.com"}, id="c1"))

    def test_native_request_declares_tools(self):
        """Test that Function-Calling sends the registry and the seed."""
        from strategies import FunctionCallingStrategy, decide

        strategy = FunctionCallingStrategy()
        providers = assistant("Hello!")
        decide(strategy, self.context(strategy, {"role": "user", "content": "hi"}), providers)

        request = providers["assistant"].requests[0]
        self.assertEqual([t.name for t in request.tools], [t.name for t in self.suite.tools])
        self.assertEqual(request.seed, 11)
        self.assertIn("Only orders with status 'pending' can be cancelled.", request.messages[0].content)

    def test_repair_round(self):
        """Test that one unusable reply is repaired with feedback."""
        from models import Respond
        from strategies import FunctionCallingStrategy, decide

        strategy = FunctionCallingStrategy()
        providers = assistant(native_call("drop_tables", {}), "How can I help?")

        action = decide(strategy, self.context(strategy, {"role": "user", "content": "hi"}), providers)

        self.assertEqual(action, Respond("How can I help?"))
        repair = providers["assistant"].requests[1].messages[-1]
        self.assertEqual(repair.role, "system")
        self.assertIn("undeclared tool 'drop_tables'", repair.content)

    def test_second_failure_is_strategy_error(self):
        """Test that a second unusable reply ends in StrategyError."""
        from strategies import FunctionCallingStrategy, StrategyError, decide

        strategy = FunctionCallingStrategy()
        providers = assistant(native_call("drop_tables", {}), "   ")

        with self.assertRaises(StrategyError) as context:
            decide(strategy, self.context(strategy, {"role": "user", "content": "hi"}), providers)

        self.assertIn("schema_violation", str(context.exception))

    def test_function_calling_rejects_missing_arguments(self):
        """Test that without follow-up-first a call missing arguments is repaired."""
        from models import ToolCall
        from strategies import FunctionCallingStrategy, decide

        strategy = FunctionCallingStrategy()
        providers = assistant(native_call("cancel_order", {}), native_call("cancel_order", {"order_id": "o1"}, "c2"))

        action = decide(strategy, self.context(strategy, {"role": "user", "content": "cancel o1"}), providers)

        self.assertEqual(action, ToolCall(name="cancel_order", arguments={"order_id": "o1"}, id="c2"))

    def test_react_decodes_text(self):
        """Test that ReAct reads Thought/Action text and keeps the reasoning."""
        from strategies import ReActStrategy, decide

        strategy = ReActStrategy()
        providers = assistant(text_action("get_order", {"order_id": "o1"}, "Look up the order."))

        action = decide(strategy, self.context(strategy, {"role": "user", "content": "where is o1"}), providers)

        self.assertEqual((action.name, action.arguments, action.reasoning),
                         ("get_order", {"order_id": "o1"}, "Look up the order."))
        request = providers["assistant"].requests[0]
        self.assertIsNone(request.tools)
        self.assertIn("get_order(order_id: string)", request.messages[0].content)

    def test_react_repair_keeps_bad_reply(self):
        """Test that ReAct repair shows the model its own unusable output."""
        from models import Respond
        from strategies import ReActStrategy, decide

        strategy = ReActStrategy()
        providers = assistant("I will just chat.", text_action("respond", {"content": "Hello!"}))

        action = decide(strategy, self.context(strategy, {"role": "user", "content": "hi"}), providers)

        self.assertEqual(action, Respond("Hello!"))
        messages = providers["assistant"].requests[1].messages
        self.assertEqual(messages[-2].role, "assistant")
        self.assertIn("I will just chat.", messages[-2].content)
        self.assertEqual(messages[-1].role, "user")
        self.assertIn("no fenced Action block", messages[-1].content)

    def test_build_strategy(self):
        """Test strategy lookup by name."""
        from strategies import STRATEGY_NAMES, build_strategy

        for name in STRATEGY_NAMES:
            with self.subTest(name=name):
                self.assertEqual(build_strategy(name).name, name)
        with self.assertRaises(ValueError):
            build_strategy("tree_of_thoughts")

    def test_settings_validation(self):
        """Test StrategySettings checks and the ablation label."""
        from strategies import StrategySettings

        self.assertEqual(StrategySettings().ablation_label, "M+C+T")
        self.assertEqual(StrategySettings(irma_memory=False, irma_tools=False).ablation_label, "C")
        self.assertEqual(StrategySettings(irma_memory=False, irma_constraints=False, irma_tools=False).ablation_label,
                         "none")
        with self.assertRaises(ValueError):
            StrategySettings(fact_backbone="tree")
        with self.assertRaises(ValueError):
            StrategySettings(suggestion_cap=0)


class TestFollowUpFirst(StrategyTestCase):
    """Tests for FACT's follow-up-first rules."""

    def authenticated(self, strategy, user_text):
        from models import ToolCall

        return self.context(
            strategy,
            {"role": "user", "content": user_text},
            {"role": "assistant", "content": "",
             "tool_calls": [ToolCall(name="find_user", arguments={"email": "jane@example.com"}, id="a1")]},
            {"role": "tool", "content": "{\"name\": \"Jane Doe\", \"user_id\": \"u1\"}", "tool_call_id": "a1"},
        )

    def test_identity_first(self):
        """Test that an identity-gated call before authentication becomes the identity question."""
        from models import Respond
        from strategies import FactStrategy, fact_decide

        strategy = FactStrategy()
        context = self.context(strategy, {"role": "user", "content": "cancel my order o1"})

        action = fact_decide(context, assistant(text_action("cancel_order", {"order_id": "o1"})))

        self.assertEqual(action, Respond(IDENTITY_QUESTION))

    def test_failed_authentication_does_not_count(self):
        """Test that an erroring find_user leaves identity unestablished."""
        from models import ToolCall
        from strategies import FactStrategy, identity_established

        strategy = FactStrategy()
        context = self.context(
            strategy,
            {"role": "assistant", "content": "",
             "tool_calls": [ToolCall(name="find_user", arguments={"email": "x@y.z"}, id="a1")]},
            {"role": "tool", "content": "Error: user not found: x@y.z", "tool_call_id": "a1"},
        )

        self.assertFalse(identity_established(context))

    def test_grounded_call_passes(self):
        """Test that an authenticated call with user-given ids goes through."""
        from models import ToolCall
        from strategies import FactStrategy, fact_decide

        strategy = FactStrategy()
        action = fact_decide(self.authenticated(strategy, "cancel my order o1"),
                             assistant(text_action("cancel_order", {"order_id": "o1"})))

        self.assertIsInstance(action, ToolCall)
        self.assertEqual(action.arguments, {"order_id": "o1"})

    def test_ungrounded_value_is_asked_for(self):
        """Test that an id nobody mentioned triggers a follow-up question."""
        from models import Respond
        from strategies import FactStrategy, fact_decide

        strategy = FactStrategy()
        action = fact_decide(self.authenticated(strategy, "cancel my lamp order"),
                             assistant(text_action("cancel_order", {"order_id": "o9"})))

        self.assertEqual(action, Respond("To continue, could you please provide the order id?"))

    def test_missing_arguments_are_asked_for(self):
        """Test that FACT accepts a partial call and asks for the missing fields."""
        from models import Respond
        from strategies import FactStrategy, fact_decide

        strategy = FactStrategy()
        action = fact_decide(self.authenticated(strategy, "exchange something in o2"),
                             assistant(text_action("exchange_item", {"order_id": "o2"})))

        self.assertEqual(action, Respond("To continue, could you please provide the item id and new item id?"))

    def test_handoff_is_never_gated(self):
        """Test that a transfer to a human needs no identity."""
        from models import ToolCall
        from strategies import FactStrategy, fact_decide

        strategy = FactStrategy()
        action = fact_decide(self.context(strategy, {"role": "user", "content": "cancel o1 and also do not"}),
                             assistant(text_action("transfer_to_human", {"summary": "contradictory requests"})))

        self.assertIsInstance(action, ToolCall)
        self.assertEqual(action.name, "transfer_to_human")

    def test_native_backbone(self):
        """Test that FACT can run on native tool calls."""
        from models import Respond
        from strategies import FactStrategy, StrategySettings, decide

        strategy = FactStrategy(StrategySettings(fact_backbone="function_calling"))
        providers = assistant(native_call("get_order", {"order_id": "o1"}))

        action = decide(strategy, self.context(strategy, {"role": "user", "content": "where is o1"}), providers)

        self.assertTrue(strategy.native_tools)
        self.assertEqual(action, Respond(IDENTITY_QUESTION))
        self.assertIsNotNone(providers["assistant"].requests[0].tools)


if __name__ == "__main__":
    unittest.main()
