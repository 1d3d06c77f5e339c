"""
Test LLM Integration Module

Tests for the completion gateway: scripted replay, script bundles and the
live chat-completions provider with its retry policy.
"""

import json
import os
import shutil
import tempfile
import unittest
from types import SimpleNamespace
from unittest.mock import patch, MagicMock

import httpx
import openai

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCRIPTS_DIR = os.path.join(ROOT, "data", "scripts")


def make_request(user_text="hello", tools=None):
    from llm_integration import CompletionRequest
    from models import ChatMessage

    return CompletionRequest(
        messages=[ChatMessage(role="system", content="sys"), ChatMessage(role="user", content=user_text)],
        tools=tools,
    )


def fake_response(content="", tool_calls=()):
    calls = [SimpleNamespace(id=f"call_{i}", function=SimpleNamespace(name=name, arguments=arguments))
             for i, (name, arguments) in enumerate(tool_calls)]
    message = SimpleNamespace(content=content, tool_calls=calls or None)
    return SimpleNamespace(choices=[SimpleNamespace(message=message)])


class TestScriptedProvider(unittest.TestCase):
    """Tests for the scripted provider."""

    def test_strict_sequence_replays_in_order(self):
        """Test that a strict script returns its replies in order and then runs out."""
        from llm_integration import ScriptExhausted, make_scripted_provider

        provider = make_scripted_provider({"entries": [{"reply": "one"}, {"reply": "two"}]})

        self.assertEqual(provider.complete(make_request()).content, "one")
        self.assertEqual(provider.complete(make_request()).content, "two")
        with self.assertRaises(ScriptExhausted):
            provider.complete(make_request())
        self.assertEqual(provider.calls, 3)

    def test_strict_key_mismatch(self):
        """Test that a strict entry whose key is absent from the user message fails."""
        from llm_integration import ScriptExhausted, make_scripted_provider

        provider = make_scripted_provider({"entries": [{"key": "email", "reply": "x"}]})

        with self.assertRaises(ScriptExhausted) as context:
            provider.complete(make_request("what is your name"))

        self.assertIn("expects 'email'", str(context.exception))

    def test_keyed_lookup_is_case_insensitive_and_first_match(self):
        """Test that keyed scripts pick the first entry whose key occurs in the latest user message."""
        from llm_integration import ScriptExhausted, make_scripted_provider

        provider = make_scripted_provider({"mode": "keyed", "entries": [
            {"key": "email", "reply": "jane@example.com"},
            {"key": "help", "reply": "cancel please"},
        ]})

        self.assertEqual(provider.complete(make_request("Your EMAIL, and how can I help?")).content,
                         "jane@example.com")
        self.assertEqual(provider.complete(make_request("How can I help?")).content, "cancel please")
        with self.assertRaises(ScriptExhausted):
            provider.complete(make_request("goodbye"))

    def test_keyed_duplicate_keys_rejected(self):
        """Test that two entries with the same key are a script error."""
        from llm_integration import ScriptError, make_scripted_provider

        with self.assertRaises(ScriptError):
            make_scripted_provider({"mode": "keyed", "entries": [{"key": "a", "reply": "1"},
                                                                   {"key": "A", "reply": "2"}]})

    def test_replies_are_copies(self):
        """Test that mutating a returned message does not change the script."""
        from llm_integration import make_scripted_provider

        provider = make_scripted_provider({"mode": "keyed", "entries": [{"reply": "same"}]})
        first = provider.complete(make_request())
        first.content = "changed"

        self.assertEqual(provider.complete(make_request()).content, "same")

    def test_malformed_script(self):
        """Test that unknown fields in a script are rejected."""
        from llm_integration import ScriptError, make_scripted_provider

        with self.assertRaises(ScriptError):
            make_scripted_provider({"entries": [{"reply": "x", "delay": 3}]})


class TestCompleteGateway(unittest.TestCase):
    """Tests for reply validation in complete()."""

    def setUp(self):
        from models import ToolParam, ToolSpec

        self.tools = [ToolSpec(name="get_order", params=[ToolParam(name="order_id", type="string")])]

    def scripted_call(self, name, arguments):
        from llm_integration import make_scripted_provider

        return make_scripted_provider({"entries": [{"reply": {
            "role": "assistant", "content": "", "tool_calls": [{"id": "c1", "name": name, "arguments": arguments}],
        }}]})

    def test_declared_call_passes(self):
        """Test that a call to a declared tool is returned unchanged."""
        from llm_integration import complete

        message = complete(self.scripted_call("get_order", {"order_id": "o1"}), make_request(tools=self.tools))

        self.assertEqual(message.tool_calls[0].arguments, {"order_id": "o1"})

    def test_missing_arguments_are_left_to_strategies(self):
        """Test that a call without required arguments is not a schema violation."""
        from llm_integration import complete

        message = complete(self.scripted_call("get_order", {}), make_request(tools=self.tools))

        self.assertEqual(message.tool_calls[0].name, "get_order")

    def test_schema_violations(self):
        """Test that undeclared tools and mistyped arguments are rejected."""
        from llm_integration import SchemaViolation, complete

        cases = [("drop_tables", {}), ("get_order", {"order_id": 7}), ("get_order", {"id": "o1"})]
        for name, arguments in cases:
            with self.subTest(name=name, arguments=arguments):
                with self.assertRaises(SchemaViolation):
                    complete(self.scripted_call(name, arguments), make_request(tools=self.tools))

    def test_request_needs_leading_system_or_user(self):
        """Test that a request cannot start with an assistant message."""
        from pydantic import ValidationError
        from llm_integration import CompletionRequest
        from models import ChatMessage

        with self.assertRaises(ValidationError):
            CompletionRequest(messages=[ChatMessage(role="assistant", content="hi")])


class TestLiveProvider(unittest.TestCase):
    """Tests for LiveProvider with the OpenAI client mocked out."""

    def setUp(self):
        self.http_request = httpx.Request("POST", "http://localhost/v1/chat/completions")

    def make_provider(self, mock_openai, max_attempts=3):
        from llm_integration import LiveProvider

        client = MagicMock()
        mock_openai.return_value = client
        provider = LiveProvider("http://localhost/v1", "test-key", "gpt-test", max_attempts=max_attempts,
                                backoff_factor=0)
        return provider, client

    @patch('llm_integration.OpenAI')
    def test_payload_and_text_reply(self, mock_openai):
        """Test that the request is sent in chat-completions form and text comes back."""
        from models import ToolParam, ToolSpec

        provider, client = self.make_provider(mock_openai)
        client.chat.completions.create.return_value = fake_response("Hello there")
        tools = [ToolSpec(name="get_order", params=[ToolParam(name="order_id", type="string")])]

        message = provider.complete(make_request(tools=tools))

        self.assertEqual(message.role, "assistant")
        self.assertEqual(message.content, "Hello there")
        payload = client.chat.completions.create.call_args.kwargs
        self.assertEqual(payload["model"], "gpt-test")
        self.assertEqual(payload["messages"][1], {"role": "user", "content": "hello"})
        self.assertEqual(payload["tools"][0]["function"]["name"], "get_order")
        mock_openai.assert_called_once_with(base_url="http://localhost/v1", api_key="test-key", timeout=60.0,
                                            max_retries=0)

    @patch('llm_integration.OpenAI')
    def test_tool_call_reply(self, mock_openai):
        """Test that native tool calls are decoded into ToolCall values."""
        provider, client = self.make_provider(mock_openai)
        client.chat.completions.create.return_value = fake_response(
            tool_calls=[("get_order", json.dumps({"order_id": "o1"}))])

        message = provider.complete(make_request())

        self.assertEqual(message.tool_calls[0].name, "get_order")
        self.assertEqual(message.tool_calls[0].arguments, {"order_id": "o1"})
        self.assertEqual(message.tool_calls[0].id, "call_0")

    @patch('llm_integration.OpenAI')
    def test_non_json_arguments(self, mock_openai):
        """Test that unparseable tool arguments raise SchemaViolation."""
        from llm_integration import SchemaViolation

        provider, client = self.make_provider(mock_openai)
        client.chat.completions.create.return_value = fake_response(tool_calls=[("get_order", "{oops")])

        with self.assertRaises(SchemaViolation):
            provider.complete(make_request())

    @patch('llm_integration.OpenAI')
    def test_retries_transient_errors(self, mock_openai):
        """Test that connection and 5xx errors are retried until a reply arrives."""
        provider, client = self.make_provider(mock_openai)
        server_error = openai.InternalServerError(
            "boom", response=httpx.Response(500, request=self.http_request), body=None)
        client.chat.completions.create.side_effect = [
            openai.APIConnectionError(request=self.http_request),
            server_error,
            fake_response("finally"),
        ]

        message = provider.complete(make_request())

        self.assertEqual(message.content, "finally")
        self.assertEqual(client.chat.completions.create.call_count, 3)

    @patch('llm_integration.OpenAI')
    def test_gives_up_after_max_attempts(self, mock_openai):
        """Test that persistent transient errors become a ProviderFailure."""
        from llm_integration import ProviderFailure

        provider, client = self.make_provider(mock_openai, max_attempts=2)
        client.chat.completions.create.side_effect = openai.APIConnectionError(request=self.http_request)

        with self.assertRaises(ProviderFailure) as context:
            provider.complete(make_request())

        self.assertIn("gave up after 2 attempt(s)", str(context.exception))
        self.assertEqual(client.chat.completions.create.call_count, 2)

    @patch('llm_integration.OpenAI')
    def test_client_errors_are_not_retried(self, mock_openai):
        """Test that a 4xx response fails at once and keeps its status."""
        from llm_integration import ProviderFailure

        provider, client = self.make_provider(mock_openai)
        client.chat.completions.create.side_effect = openai.BadRequestError(
            "bad request", response=httpx.Response(400, request=self.http_request), body=None)

        with self.assertRaises(ProviderFailure) as context:
            provider.complete(make_request())

        self.assertEqual(context.exception.status, 400)
        self.assertEqual(client.chat.completions.create.call_count, 1)

    @patch.dict(os.environ, {}, clear=True)
    def test_live_factory_needs_api_key(self):
        """Test that a live factory refuses to start without its API key variable."""
        from llm_integration import LiveProviderFactory

        with self.assertRaises(ValueError) as context:
            LiveProviderFactory("http://localhost/v1", "MISSING_KEY", "gpt-test")

        self.assertIn("MISSING_KEY", str(context.exception))

    @patch.dict(os.environ, {"TEST_KEY": "abc"})
    @patch('llm_integration.OpenAI')
    def test_live_factory_shares_clients(self, mock_openai):
        """Test that every role gets the assistant client unless a user model is set."""
        from llm_integration import ROLES, LiveProviderFactory

        factory = LiveProviderFactory("http://localhost/v1", "TEST_KEY", "gpt-test", user_model="gpt-user")
        providers = factory("t1", 0, 0)

        self.assertEqual(set(providers), set(ROLES))
        self.assertIs(providers["constraints"], factory.assistant)
        self.assertEqual(providers["user"].model, "gpt-user")


class TestScriptBundles(unittest.TestCase):
    """Tests for script bundle files and the scripted provider factory."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def write(self, name, document):
        path = os.path.join(self.temp_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(document, f)
        return path

    def test_shipped_scripts_validate(self):
        """Test that every shipped strategy script builds providers for five trials."""
        from llm_integration import ScriptedProviderFactory
        from strategies import STRATEGY_NAMES

        for strategy in STRATEGY_NAMES:
            with self.subTest(strategy=strategy):
                factory = ScriptedProviderFactory(SCRIPTS_DIR, strategy)
                factory.validate(["t1", "t2", "t3"], 5)

    def test_trial_overrides(self):
        """Test that per-trial scripts replace the task default for that trial only."""
        from llm_integration import ScriptedProviderFactory

        factory = ScriptedProviderFactory(SCRIPTS_DIR, "function_calling")
        default = factory("t2", 0, 0)["assistant"].script
        override = factory("t2", 3, 0)["assistant"].script

        self.assertNotEqual(default, override)
        self.assertEqual(factory("t2", 1, 0)["assistant"].script, default)

    def test_overrides_follow_trial_index_not_seed(self):
        """Test that the trial seed never changes which scripts a trial gets."""
        from llm_integration import ScriptedProviderFactory

        factory = ScriptedProviderFactory(SCRIPTS_DIR, "function_calling")
        for trial_index in (0, 3):
            with self.subTest(trial_index=trial_index):
                scripts = {role: provider.script for role, provider in factory("t2", trial_index, 0).items()}
                for seed in (1, 7919, 2 ** 31):
                    salted = {role: provider.script for role, provider in factory("t2", trial_index, seed).items()}
                    self.assertEqual(salted, scripts)

    def test_factory_gives_fresh_providers(self):
        """Test that each call builds new providers with their own cursors."""
        from llm_integration import ScriptedProviderFactory

        factory = ScriptedProviderFactory(SCRIPTS_DIR, "react")
        first = factory("t1", 0, 0)["assistant"]
        first.complete(make_request())

        self.assertEqual(factory("t1", 0, 0)["assistant"].calls, 0)

    def test_unknown_role(self):
        """Test that an unknown role in a bundle is reported with its path."""
        from llm_integration import ScriptError, load_script_bundle

        path = self.write("bad.json", {"format": "provider-scripts/v1",
                                       "tasks": {"t1": {"critic": {"entries": []}}}})

        with self.assertRaises(ScriptError) as context:
            load_script_bundle(path)

        self.assertIn("tasks.t1.critic: unknown role", str(context.exception))

    def test_wrong_format(self):
        """Test that a bundle without the format marker is rejected."""
        from llm_integration import ScriptError, load_script_bundle

        with self.assertRaises(ScriptError):
            load_script_bundle(self.write("bad.json", {"tasks": {}}))

    def test_missing_strategy_file(self):
        """Test that the factory needs a script file for its strategy."""
        from llm_integration import ScriptError, ScriptedProviderFactory

        with self.assertRaises(ScriptError) as context:
            ScriptedProviderFactory(self.temp_dir, "react")

        self.assertIn("no scripts for strategy 'react'", str(context.exception))


if __name__ == "__main__":
    unittest.main()
