import json

import pytest
import requests

from sbacl.credentials import KIND_AUTHN, KIND_AUTHZ
from sbacl.httputil import HttpService, QuietHandler
from sbacl.ipmf import Ipmf
from sbacl.mocknf import Behavior, MockNf
from sbacl.sidecar import Association, AssociationStore, LocalService, RouteRule, Sidecar
from sbacl.vdr import Registry


@pytest.fixture()
def world(tmp_path):
    w = World(tmp_path)
    yield w
    w.shutdown()


class World:
    """A producer/consumer sidecar pair under one root, on live listeners."""

    def __init__(self, tmp_path, consumer_grants=None):
        self.tmp_path = tmp_path
        self.registry = Registry()
        self.root = Ipmf("root", self.registry, allow_direct_issuance=True)
        self.root.bootstrap(serve=False)
        self.started = []

        behaviors = [
            Behavior("GET", "/nudm-sdm/v2/data", 200, {"data": "subscriber"}),
            Behavior("POST", "/nudm-uecm/v1/registrations", 201, {"registered": True}),
            Behavior("DELETE", "/nudm-sdm/v2/data", 200, {"deleted": True}),
        ]
        self.producer_nf = MockNf("UDM-1-nf", "UDM", behaviors).start()
        self.started.append(self.producer_nf.stop)
        self.consumer_nf = MockNf("AMF-1-nf", "AMF", []).start()
        self.started.append(self.consumer_nf.stop)

        self.producer = Sidecar(
            "UDM-1", "UDM", self.registry,
            local_nf_url=self.producer_nf.base_url,
            trusted_roots=[self.root.did],
            local_services=[
                LocalService("nudm-sdm", "/nudm-sdm/"),
                LocalService("nudm-uecm", "/nudm-uecm/"),
            ],
            association_store=tmp_path / "producer.assoc",
        )
        self.producer.bootstrap()
        self.started.append(self.producer.shutdown)

        if consumer_grants is None:
            consumer_grants = [
                {"producer": "UDM", "service": "nudm-sdm", "ops": "GET"},
                {"producer": "UDM", "service": "nudm-uecm", "ops": "POST"},
            ]
        self.consumer = self.make_consumer("AMF-1", consumer_grants,
                                           store=tmp_path / "consumer.assoc")

        self.provision(self.producer, {"nf_type": "UDM", "domain": "core"}, [])

    def make_consumer(self, name, grants, store=None, keys=None, **kwargs):
        consumer = Sidecar(
            name, "AMF", self.registry,
            local_nf_url=self.consumer_nf.base_url,
            trusted_roots=[self.root.did],
            routes=[RouteRule(host="UDM-1", target_did=self.producer.did)],
            association_store=store,
            keys=keys,
            **kwargs,
        )
        consumer.bootstrap()
        self.started.append(consumer.shutdown)
        self.provision(consumer, {"nf_type": "AMF", "domain": "core"}, grants)
        return consumer

    def provision(self, sidecar, authn_claims, grants):
        sidecar.add_credential(
            self.root.issue_credential_to(sidecar.did, KIND_AUTHN, authn_claims))
        for claims in grants:
            sidecar.add_credential(
                self.root.issue_credential_to(sidecar.did, KIND_AUTHZ, claims))

    def shutdown(self):
        for stop in reversed(self.started):
            stop()

    def call(self, method, path, body=None, headers=None, consumer=None):
        consumer = consumer or self.consumer
        merged = {"Host": "UDM-1"}
        merged.update(headers or {})
        return requests.request(method, consumer.intercept_url + path,
                                headers=merged,
                                data=json.dumps(body) if body is not None else None,
                                timeout=10)


# --- happy paths ---------------------------------------------------------------


def test_tunneled_get(world):
    resp = world.call("GET", "/nudm-sdm/v2/data")
    assert resp.status_code == 200
    assert resp.json() == {"data": "subscriber"}
    assert world.producer_nf.requests[-1] == ("GET", "/nudm-sdm/v2/data")
    assert world.consumer.handshakes_initiated == 1


def test_tunneled_post_with_body(world):
    resp = world.call("POST", "/nudm-uecm/v1/registrations", body={"imsi": "001"})
    assert resp.status_code == 201
    assert resp.json() == {"registered": True}


def test_handshake_happens_once(world):
    for _ in range(3):
        assert world.call("GET", "/nudm-sdm/v2/data").status_code == 200
    assert world.consumer.handshakes_initiated == 1

    outbound = world.consumer.associations[(world.producer.did, "outbound")]
    assert outbound.established
    inbound = world.producer.associations[(world.consumer.did, "inbound")]
    assert inbound.established
    assert {"producer": "UDM", "service": "nudm-sdm", "ops": "GET"} in inbound.authz_claims


def test_forget_peer_forces_rehandshake(world):
    assert world.call("GET", "/nudm-sdm/v2/data").status_code == 200
    world.consumer.forget_peer(world.producer.did)
    assert world.call("GET", "/nudm-sdm/v2/data").status_code == 200
    assert world.consumer.handshakes_initiated == 2


# --- enforcement ----------------------------------------------------------------


def test_ungranted_operation_is_denied_before_the_nf(world):
    before = world.producer_nf.request_count()
    resp = world.call("DELETE", "/nudm-sdm/v2/data")
    assert resp.status_code == 403
    assert resp.json() == {"error": "authorization_denied"}
    assert world.producer_nf.request_count() == before


def test_unknown_path_fails_closed(world):
    before = world.producer_nf.request_count()
    resp = world.call("GET", "/nsmf-pdusession/v1/sm-contexts")
    assert resp.status_code == 403
    assert world.producer_nf.request_count() == before


def test_consumer_without_grant_cannot_associate(world, tmp_path):
    lurker = world.make_consumer("AMF-2", grants=[], store=None)
    resp = world.call("GET", "/nudm-sdm/v2/data", consumer=lurker)
    assert resp.status_code == 502
    assert resp.json()["error"] == "handshake_rejected"
    assert world.producer_nf.request_count() == 0


def test_no_route_for_unknown_host(world):
    resp = world.call("GET", "/nudm-sdm/v2/data", headers={"Host": "PCF-1"})
    assert resp.status_code == 502
    assert resp.json()["error"] == "no_route"


def test_revoked_authz_blocks_the_next_handshake(world):
    assert world.call("GET", "/nudm-sdm/v2/data").status_code == 200
    for vc in world.consumer.authz_creds:
        world.root.revoke_credential(vc.credential_id)
    world.consumer.forget_peer(world.producer.did)
    count_before = world.producer_nf.request_count()
    resp = world.call("GET", "/nudm-sdm/v2/data")
    assert resp.status_code == 502
    assert resp.json()["error"] == "handshake_rejected"
    assert world.producer_nf.request_count() == count_before


# --- header hygiene --------------------------------------------------------------


class _EchoHandler(QuietHandler):
    def do_GET(self):
        self.read_body()
        received = {k: v for k, v in self.headers.items()}
        self.send_bytes(200, json.dumps(received).encode("utf-8"),
                        "application/json", [("X-Upstream", "yes")])


def test_hop_headers_do_not_cross_the_tunnel(world, tmp_path):
    echo = HttpService(_EchoHandler, "127.0.0.1", 0)
    echo.start()
    try:
        producer = Sidecar(
            "UDM-2", "UDM", world.registry,
            local_nf_url=echo.base_url,
            trusted_roots=[world.root.did],
            local_services=[LocalService("nudm-sdm", "/nudm-sdm/")],
        )
        producer.bootstrap()
        world.started.append(producer.shutdown)
        world.provision(producer, {"nf_type": "UDM", "domain": "core"}, [])

        consumer = Sidecar(
            "AMF-3", "AMF", world.registry,
            local_nf_url=world.consumer_nf.base_url,
            trusted_roots=[world.root.did],
            routes=[RouteRule(host="UDM-2", target_did=producer.did)],
        )
        consumer.bootstrap()
        world.started.append(consumer.shutdown)
        world.provision(consumer, {"nf_type": "AMF", "domain": "core"},
                        [{"producer": "UDM", "service": "nudm-sdm", "ops": "GET"}])

        resp = requests.get(
            consumer.intercept_url + "/nudm-sdm/v2/data",
            headers={"Host": "UDM-2", "X-Custom": "abc",
                     "Te": "sentinel", "Upgrade": "h2c"},
            timeout=10,
        )
        assert resp.status_code == 200
        seen = resp.json()
        assert seen.get("X-Custom") == "abc"
        assert seen.get("Te") is None
        assert seen.get("Upgrade") is None
        # the Host the local NF sees is its own, not the route alias
        assert "UDM-2" not in seen.get("Host", "")
        # non-hop response headers survive the tunnel
        assert resp.headers.get("X-Upstream") == "yes"
    finally:
        echo.stop()


# --- restarts and state loss -------------------------------------------------------


def test_consumer_restart_reuses_association(world, tmp_path):
    assert world.call("GET", "/nudm-sdm/v2/data").status_code == 200
    keys = world.consumer.keys
    store = world.consumer._store.path
    world.consumer.shutdown()

    reborn = Sidecar(
        "AMF-1", "AMF", world.registry,
        local_nf_url=world.consumer_nf.base_url,
        trusted_roots=[world.root.did],
        routes=[RouteRule(host="UDM-1", target_did=world.producer.did)],
        association_store=store,
        keys=keys,
    )
    reborn.bootstrap()
    world.started.append(reborn.shutdown)
    # operational credentials live in memory; a supervisor would re-add them
    for vc in world.consumer.authn_creds + world.consumer.authz_creds:
        reborn.add_credential(vc)

    resp = world.call("GET", "/nudm-sdm/v2/data", consumer=reborn)
    assert resp.status_code == 200
    assert reborn.handshakes_initiated == 0


def test_producer_state_loss_triggers_one_rehandshake(world):
    assert world.call("GET", "/nudm-sdm/v2/data").status_code == 200
    world.producer.associations.clear()

    resp = world.call("GET", "/nudm-sdm/v2/data")
    assert resp.status_code == 200
    assert world.consumer.handshakes_initiated == 2
    assert (world.consumer.did, "inbound") in world.producer.associations


def test_producer_full_restart(world, tmp_path):
    assert world.call("GET", "/nudm-sdm/v2/data").status_code == 200
    keys = world.producer.keys
    world.producer.shutdown()

    reborn = Sidecar(
        "UDM-1", "UDM", world.registry,
        local_nf_url=world.producer_nf.base_url,
        trusted_roots=[world.root.did],
        local_services=[
            LocalService("nudm-sdm", "/nudm-sdm/"),
            LocalService("nudm-uecm", "/nudm-uecm/"),
        ],
        association_store=tmp_path / "producer2.assoc",  # wiped store
        keys=keys,
    )
    reborn.bootstrap()
    world.started.append(reborn.shutdown)
    for vc in world.producer.authn_creds:
        reborn.add_credential(vc)
    # the endpoint moved: the published document gained a version
    assert reborn.doc_version == 2

    # expired pin plus refresh enabled lets the consumer find the new
    # endpoint, then the wiped store costs exactly one re-handshake
    world.consumer.cache_max_age = 0.0
    resp = world.call("GET", "/nudm-sdm/v2/data")
    assert resp.status_code == 200
    assert world.consumer.handshakes_initiated == 2


# --- key rotation ------------------------------------------------------------------


def test_rotation_with_refresh_continues(world):
    assert world.call("GET", "/nudm-sdm/v2/data").status_code == 200
    world.producer.rotate_keys()
    assert world.producer.doc_version == 2
    world.consumer.cache_max_age = 0.0  # every call re-checks the registry
    resp = world.call("GET", "/nudm-sdm/v2/data")
    assert resp.status_code == 200


def test_rotation_without_refresh_surfaces_stale_key(world):
    assert world.call("GET", "/nudm-sdm/v2/data").status_code == 200
    world.consumer.refresh_enabled = False
    world.consumer.cache_max_age = 0.0
    world.producer.rotate_keys()
    resp = world.call("GET", "/nudm-sdm/v2/data")
    assert resp.status_code == 502
    assert resp.json()["error"] == "stale_peer_key"

    # the explicit operator refresh repairs it
    world.consumer.refresh_peer_document(world.producer.did)
    assert world.call("GET", "/nudm-sdm/v2/data").status_code == 200


# --- association store -------------------------------------------------------------


def test_association_store_last_record_wins(tmp_path):
    path = tmp_path / "assoc.jsonl"
    store = AssociationStore(path)
    first = Association(peer="did:speer:p", direction="outbound", established=True)
    second = Association(peer="did:speer:p", direction="outbound", established=False)
    other = Association(peer="did:speer:q", direction="inbound", established=True,
                        authz_claims=[{"producer": "UDM"}])
    for assoc in (first, second, other):
        store.append(assoc)

    loaded = AssociationStore(path).load()
    assert loaded[("did:speer:p", "outbound")].established is False
    assert loaded[("did:speer:q", "inbound")].authz_claims == [{"producer": "UDM"}]


def test_association_store_corruption_degrades_to_empty(tmp_path):
    path = tmp_path / "assoc.jsonl"
    good = Association(peer="did:speer:p", direction="outbound", established=True)
    AssociationStore(path).append(good)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("{this is not json\n")
    assert AssociationStore(path).load() == {}


def test_association_store_disabled(tmp_path):
    store = AssociationStore(None)
    store.append(Association(peer="p", direction="outbound"))
    assert store.load() == {}
