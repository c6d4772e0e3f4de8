"""Single entrypoint to run, script, and inspect the whole system.

Every flag can also be set through an environment variable prefixed
``IORT_`` (for example ``IORT_BROKER_SERVE_PORT=7450``). Output that
represents protocol data is printed as the exact wire JSON, so transcripts
are machine-checkable. Exit codes: 0 ok, 1 runtime failure, 2 usage.
"""

from __future__ import annotations

import asyncio
import json
import logging
import sys
import time

import click

from . import arm_model
from .broker import BrokerCore, DEFAULT_HTTP_PORT, DEFAULT_TCP_PORT
from .clock import SimClock, WallClock
from .client import OperatorClient, OperatorClientError
from .device_agent import NetworkAgent
from .protocol import encode
from .scenario import ScenarioError, ScenarioRunner, parse_scenario

logger = logging.getLogger(__name__)


def _parse_addr(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise click.UsageError(f"--broker must be host:port, got {value!r}")
    return host, int(port)


def _parse_angles(value: str) -> tuple[float, float, float, float, float]:
    parts = value.split(",")
    if len(parts) != 5:
        raise click.UsageError("--angles takes five comma-separated degrees")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError:
        raise click.UsageError(f"--angles values must be numbers, got {value!r}") from None


@click.group(context_settings={"auto_envvar_prefix": "IORT"})
@click.option("-v", "--verbose", is_flag=True, help="Debug logging.")
def main(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# -- broker ---------------------------------------------------------------------


@main.group()
def broker() -> None:
    """The command broker service."""


@broker.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=DEFAULT_TCP_PORT, show_default=True, help="TCP stream endpoint.")
@click.option("--http-port", default=DEFAULT_HTTP_PORT, show_default=True, help="HTTP/WebSocket gateway.")
@click.option("--journal", type=click.Path(), default=None, help="Append-only journal file.")
@click.option("--lease-ms", default=30_000, show_default=True)
@click.option("--promote-k", default=3, show_default=True, help="Repetitions before a sequence is learned.")
@click.option("--idle-gap-s", default=10.0, show_default=True, help="Silence that closes a command sequence.")
def broker_serve(host, port, http_port, journal, lease_ms, promote_k, idle_gap_s) -> None:
    """Run the broker until interrupted."""
    from .server import BrokerServer

    try:
        core = BrokerCore(
            WallClock(), journal,
            lease_ms=lease_ms, promote_k=promote_k, idle_gap_s=idle_gap_s,
        )
    except OSError as exc:
        click.echo(f"cannot open journal: {exc}", err=True)
        sys.exit(1)

    async def _run() -> None:
        server = BrokerServer(core, host=host, tcp_port=port, http_port=http_port)
        try:
            await server.start()
        except OSError as exc:
            click.echo(f"cannot bind: {exc}", err=True)
            raise SystemExit(1)
        try:
            await asyncio.gather(server._uvicorn_task, *server._tasks)
        except asyncio.CancelledError:
            pass

    try:
        asyncio.run(_run())
    except KeyboardInterrupt:
        pass
    finally:
        core.close()


# -- agent ----------------------------------------------------------------------


@main.group()
def agent() -> None:
    """The robot-side device agent."""


@agent.command("run")
@click.option("--arm-id", required=True)
@click.option("--profile", "profile_path", type=click.Path(exists=True), default=None,
              help="Arm profile YAML; defaults to the built-in profile.")
@click.option("--broker", "broker_addr", default=f"127.0.0.1:{DEFAULT_TCP_PORT}", show_default=True)
@click.option("--speed-scale", default=1.0, show_default=True,
              help="Multiply servo speeds (2.0 = twice as fast).")
@click.option("--dedup-journal", type=click.Path(), default=None,
              help="Persist the executed-id window across restarts.")
@click.option("--max-retries", default=None, type=int,
              help="Give up after this many failed connection attempts.")
def agent_run(arm_id, profile_path, broker_addr, speed_scale, dedup_journal, max_retries) -> None:
    """Drive one simulated arm against a broker."""
    profile = arm_model.load_profile(profile_path) if profile_path else arm_model.DEFAULT_PROFILE
    agent_obj = NetworkAgent(
        _parse_addr(broker_addr), arm_id, profile,
        dedup_path=dedup_journal, speed_scale=speed_scale, max_retries=max_retries,
    )
    try:
        agent_obj.run()
    except KeyboardInterrupt:
        agent_obj.stop()
    except (ConnectionError, OSError) as exc:
        click.echo(f"broker unreachable: {exc}", err=True)
        sys.exit(1)


# -- operator ---------------------------------------------------------------------


@main.group()
def operator() -> None:
    """Operator-side tools: send commands, replay scripts, watch events."""


@operator.command("send")
@click.option("--arm", "arm_id", required=True)
@click.option("--angles", required=True, help="base,shoulder,elbow,wrist_pitch,wrist_roll degrees.")
@click.option("--gripper", default=0.0, show_default=True, help="Aperture in mm.")
@click.option("--broker", "broker_addr", default=f"127.0.0.1:{DEFAULT_TCP_PORT}", show_default=True)
@click.option("--operator", "operator_id", default="op-cli", show_default=True)
@click.option("--id", "command_id", default=None, help="Command id (UUID); generated when omitted.")
@click.option("--timeout", default=30.0, show_default=True)
def operator_send(arm_id, angles, gripper, broker_addr, operator_id, command_id, timeout) -> None:
    """Send one command and print its ack as wire JSON."""
    parsed = _parse_angles(angles)
    host, port = _parse_addr(broker_addr)
    try:
        with OperatorClient(host, port, operator_id, timeout_s=timeout) as client:
            cmd = client.send_command(arm_id, parsed, gripper, command_id=command_id)
            ack_env = client.wait_for(
                lambda env: (env.type == "ack" and env.body.command_id == cmd.id)
                or (env.type == "notification" and env.body.topic == "error"),
                timeout_s=timeout,
            )
            sys.stdout.write(encode(ack_env).decode())
            if ack_env.type != "ack" or ack_env.body.status != "ok":
                sys.exit(1)
    except (OperatorClientError, ConnectionError, OSError) as exc:
        click.echo(f"send failed: {exc}", err=True)
        sys.exit(1)


@operator.command("watch")
@click.option("--topics", default="arm.*", show_default=True, help="Comma-separated topic patterns.")
@click.option("--broker", "broker_addr", default=f"127.0.0.1:{DEFAULT_TCP_PORT}", show_default=True)
@click.option("--operator", "operator_id", default="op-watch", show_default=True)
@click.option("--count", default=None, type=int, help="Exit after this many envelopes.")
def operator_watch(topics, broker_addr, operator_id, count) -> None:
    """Tail push events as wire JSON lines."""
    host, port = _parse_addr(broker_addr)
    try:
        with OperatorClient(host, port, operator_id, timeout_s=86_400) as client:
            client.subscribe([t for t in topics.split(",") if t])
            seen = 0
            while count is None or seen < count:
                env = client.next_envelope(timeout_s=86_400)
                sys.stdout.write(encode(env).decode())
                sys.stdout.flush()
                seen += 1
    except KeyboardInterrupt:
        pass
    except (OperatorClientError, ConnectionError, OSError) as exc:
        click.echo(f"watch failed: {exc}", err=True)
        sys.exit(1)


@operator.command("script")
@click.argument("scenario_file", type=click.Path(exists=True))
@click.option("--sim-clock", is_flag=True,
              help="Run broker and agents in-process on simulated time.")
@click.option("--journal", type=click.Path(), default=None, help="Journal file (sim mode).")
@click.option("--snapshot", type=click.Path(), default=None,
              help="Write the final store snapshot here (sim mode).")
@click.option("--seed", default=0, show_default=True)
@click.option("--lease-ms", default=30_000, show_default=True)
@click.option("--promote-k", default=3, show_default=True)
@click.option("--idle-gap-s", default=10.0, show_default=True)
@click.option("--broker", "broker_addr", default=f"127.0.0.1:{DEFAULT_TCP_PORT}", show_default=True,
              help="Target broker (wall-clock mode).")
@click.option("--operator", "operator_id", default="op-script", show_default=True)
def operator_script(scenario_file, sim_clock, journal, snapshot, seed, lease_ms,
                    promote_k, idle_gap_s, broker_addr, operator_id) -> None:
    """Replay a scenario file (see docs/scenarios.md)."""
    with open(scenario_file, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        lines = parse_scenario(text)
    except ScenarioError as exc:
        raise click.UsageError(str(exc)) from None
    if sim_clock:
        runner = ScenarioRunner(
            journal_path=journal, seed=seed,
            lease_ms=lease_ms, promote_k=promote_k, idle_gap_s=idle_gap_s,
        )
        try:
            report = runner.run_lines(lines)
        except ScenarioError as exc:
            click.echo(f"scenario failed: {exc}", err=True)
            sys.exit(1)
        for line in runner.transcript_lines():
            sys.stdout.write(line.decode())
        if snapshot:
            runner.snapshot(snapshot)
        runner.close()
        click.echo(
            f"sent={report.commands_sent} rejected={report.commands_rejected} "
            f"final_time_ms={runner.clock.now_ms()}",
            err=True,
        )
    else:
        _script_against_live_broker(lines, broker_addr, operator_id)


def _script_against_live_broker(lines, broker_addr, operator_id) -> None:
    host, port = _parse_addr(broker_addr)
    try:
        with OperatorClient(host, port, operator_id) as client:
            client.subscribe([f"operator.{operator_id}.*", "arm.*"])
            for line in lines:
                if line.control is not None:
                    kind = line.control["ctl"]
                    if kind == "wait":
                        time.sleep(line.control["ms"] / 1000.0)
                    elif kind == "expect":
                        env = client.wait_for(lambda e, t=line.control["type"]: e.type == t
                                              or (t == "ack" and e.type == "ack"))
                        sys.stdout.write(encode(env).decode())
                    elif kind == "seed":
                        continue
                    else:
                        raise click.UsageError(
                            f"line {line.lineno}: control {kind!r} needs --sim-clock"
                        )
                    continue
                env = line.envelope
                if env.type == "command":
                    client.send_command(
                        env.body.arm_id,
                        (env.body.base_deg, env.body.shoulder_deg, env.body.elbow_deg,
                         env.body.wrist_pitch_deg, env.body.wrist_roll_deg),
                        env.body.gripper_mm,
                        command_id=env.body.id,
                        issued_at_ms=env.body.issued_at_ms,
                    )
                elif env.type == "pattern_response":
                    client.respond_prompt(env.body.pattern_id, env.body.accepted)
                elif env.type == "notification" and env.body.topic == "sequence.end":
                    client.end_sequence(env.body.event["arm_id"])
                else:
                    raise click.UsageError(
                        f"line {line.lineno}: envelope type {env.type!r} not scriptable remotely"
                    )
    except (OperatorClientError, ConnectionError, OSError) as exc:
        click.echo(f"script failed: {exc}", err=True)
        sys.exit(1)


# -- store -----------------------------------------------------------------------


def _load_store(journal: str | None, snapshot: str | None):
    from .pattern_store import PatternStore

    if (journal is None) == (snapshot is None):
        raise click.UsageError("give exactly one of --journal or --snapshot")
    if journal is not None:
        core = BrokerCore(SimClock(), journal)
        store = core.store
        core.close()
        return store
    store = PatternStore()
    try:
        store.restore(snapshot)
    except Exception as exc:
        click.echo(f"cannot restore snapshot: {exc}", err=True)
        sys.exit(1)
    return store


@main.group()
def store() -> None:
    """Inspect the two-node sequence store."""


@store.command("dump")
@click.option("--journal", type=click.Path(exists=True), default=None)
@click.option("--snapshot", type=click.Path(exists=True), default=None)
def store_dump(journal, snapshot) -> None:
    """Print the canonical store snapshot JSON."""
    tree = _load_store(journal, snapshot)
    sys.stdout.write(tree.to_snapshot_bytes().decode())


@store.command("stats")
@click.option("--journal", type=click.Path(exists=True), default=None)
@click.option("--snapshot", type=click.Path(exists=True), default=None)
def store_stats(journal, snapshot) -> None:
    """Print sequence and promotion counts."""
    tree = _load_store(journal, snapshot)
    click.echo(json.dumps(tree.stats(), indent=2))


# -- profile ---------------------------------------------------------------------


@main.group()
def profile() -> None:
    """Arm profile files."""


@profile.command("dump")
@click.option("--output", type=click.Path(), default=None, help="Write to a file instead of stdout.")
def profile_dump(output) -> None:
    """Print the built-in arm profile as YAML."""
    text = arm_model.dump_profile(arm_model.DEFAULT_PROFILE)
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


if __name__ == "__main__":
    main()
