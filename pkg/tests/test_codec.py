import pathlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cwmpkit import codec

FIXTURES = pathlib.Path(__file__).parent / "fixtures"

SUMMARY = (
    "InternetGatewayDevice:1.4 [] (Baseline:2, EthernetLAN:1, ADSLWAN:1, Time:2, "
    "IPPing:1, WiFiLAN:2, DeviceAssociation:1), VoiceService:1.0[2] (SIPEndpoint:1, "
    "Endpoint:1, TAEndpoint:1), StorageService:1.0[1] (Baseline:1, FTPServer:1, "
    "NetServer:1, HTTPServer:1, UserAccess:1, VolumeConfig:1)"
)

EXT_IP_PATH = "InternetGatewayDevice.WANDevice.1.WANConnectionDevice.1.WANIPConnection.1.ExternalIPAddress"


def bootstrap_bytes() -> bytes:
    return (FIXTURES / "inform_bootstrap.xml").read_bytes()


class TestBootstrapFixture:
    def test_decodes_to_expected_inform(self):
        env = codec.decode(bootstrap_bytes(), mode="strict")
        assert env.kind == "Inform"
        assert env.body.device_id == codec.DeviceId("AVM", "00040E", "", "001DEAD3BEEF2")
        assert [e.code for e in env.body.events] == ["0 BOOTSTRAP"]
        values = {p.path: p.value for p in env.body.parameter_list}
        assert values["InternetGatewayDevice.DeviceInfo.SoftwareVersion"] == "29.04.88"
        assert values[EXT_IP_PATH] == "10.0.0.4"
        assert values["InternetGatewayDevice.DeviceSummary"] == SUMMARY
        assert env.body.max_envelopes == 1

    def test_reencode_is_fixed_point(self):
        data = bootstrap_bytes()
        first = codec.decode(data, mode="strict")
        encoded = codec.encode(first)
        assert encoded == data
        second = codec.decode(encoded, mode="strict")
        assert second == first
        assert codec.encode(second) == encoded

    def test_validates_clean(self):
        env = codec.decode(bootstrap_bytes(), mode="strict")
        assert codec.validate(env, role="client", first_in_session=True) == []


class TestCondensedFixture:
    """The shorthand style seen in interception logs: no SOAP framing, bare
    event codes, flat Name/Value pairs, undeclared namespace prefix."""

    def test_lenient_decode_recovers_same_message(self):
        data = (FIXTURES / "inform_condensed.xml").read_bytes()
        env = codec.decode(data, mode="lenient")
        assert env.kind == "Inform"
        assert env.body.device_id.serial_number == "001DEAD3BEEF2"
        assert [e.code for e in env.body.events] == ["0 BOOTSTRAP"]
        values = {p.path: p.value for p in env.body.parameter_list}
        assert values["InternetGatewayDevice.DeviceInfo.SoftwareVersion"] == "29.04.88"
        assert values[EXT_IP_PATH] == "10.0.0.4"
        assert env.recovery_notes  # recovery is never silent

    def test_strict_mode_refuses(self):
        data = (FIXTURES / "inform_condensed.xml").read_bytes()
        with pytest.raises(codec.DecodeError):
            codec.decode(data, mode="strict")


# ---------------------------------------------------------------------------
# Round-trip property


_path_st = st.from_regex(r"[A-Za-z][A-Za-z0-9_]{0,8}(\.[A-Za-z0-9_]{1,8}){0,4}", fullmatch=True)
_text_st = st.text(
    alphabet=st.characters(blacklist_categories=("Cs", "Cc"), blacklist_characters="\r"),
    max_size=40,
)
_tricky_st = st.sampled_from(["<tag>", "a&b", 'say "hi"', "fish & < chips ]]>", "ünïcode ✓", "&amp;", "1 < 2 && 3 > 2"])
_value_st = st.one_of(_text_st, _tricky_st)
_id_st = st.from_regex(r"[A-Za-z0-9_-]{1,12}", fullmatch=True)
_type_st = st.sampled_from(["xsd:string", "xsd:unsignedInt", "xsd:boolean", "xsd:dateTime"])

_param_st = st.builds(codec.ParameterValue, path=_path_st, value=_value_st, value_type=_type_st)
_params_st = st.lists(_param_st, max_size=4).map(tuple)

_inform_st = st.builds(
    codec.Inform,
    device_id=st.builds(
        codec.DeviceId,
        manufacturer=st.sampled_from(["AVM", "Quantenna", "RouterCo"]),
        oui=st.from_regex(r"[0-9A-F]{6}", fullmatch=True),
        product_class=st.sampled_from(["", "IGW"]),
        serial_number=st.from_regex(r"[0-9A-F]{8,13}", fullmatch=True),
    ),
    events=st.lists(
        st.builds(
            codec.EventEntry,
            code=st.sampled_from(sorted(codec.KNOWN_EVENT_CODES) + ["X 00040E ODD"]),
            command_key=st.one_of(st.just(""), _id_st),
        ),
        min_size=1,
        max_size=3,
    ).map(tuple),
    parameter_list=_params_st,
    current_time=st.just("2026-08-18T10:00:00Z"),
    max_envelopes=st.just(1),
    retry_count=st.integers(min_value=0, max_value=10),
)

_body_st = st.one_of(
    _inform_st,
    st.builds(codec.InformResponse),
    st.builds(codec.GetParameterValues, names=st.lists(_path_st, min_size=1, max_size=4).map(tuple)),
    st.builds(codec.GetParameterValuesResponse, parameter_list=_params_st),
    st.builds(codec.SetParameterValues, parameter_list=_params_st, parameter_key=_id_st),
    st.builds(codec.SetParameterValuesResponse, status=st.integers(0, 1)),
    st.builds(codec.GetParameterNames, parameter_path=_path_st, next_level=st.booleans()),
    st.builds(
        codec.GetParameterNamesResponse,
        parameters=st.lists(st.builds(codec.ParameterInfo, path=_path_st, writable=st.booleans()), max_size=4).map(tuple),
    ),
    st.builds(
        codec.GetParameterAttributesResponse,
        attributes=st.lists(
            st.builds(
                codec.ParameterAttribute,
                path=_path_st,
                notification=st.integers(0, 2),
                access_list=st.lists(st.sampled_from(["Subscriber"]), max_size=1).map(tuple),
            ),
            max_size=3,
        ).map(tuple),
    ),
    st.builds(
        codec.SetParameterAttributes,
        changes=st.lists(
            st.builds(
                codec.AttributeChange,
                path=_path_st,
                notification_change=st.booleans(),
                notification=st.integers(0, 2),
                access_list_change=st.booleans(),
                access_list=st.lists(st.sampled_from(["Subscriber"]), max_size=1).map(tuple),
            ),
            max_size=3,
        ).map(tuple),
    ),
    st.builds(codec.AddObject, object_path=_path_st.map(lambda p: p + "."), parameter_key=_id_st),
    st.builds(codec.AddObjectResponse, instance_number=st.integers(1, 99), status=st.integers(0, 1)),
    st.builds(codec.DeleteObject, object_path=_path_st.map(lambda p: p + "."), parameter_key=_id_st),
    st.builds(codec.Reboot, command_key=_id_st),
    st.builds(codec.RebootResponse),
    st.builds(
        codec.Download,
        command_key=_id_st,
        file_type=st.sampled_from(["1 Firmware Upgrade Image", "3 Vendor Configuration File"]),
        url=st.just("http://updates.example.net/fw.bin"),
        username=_id_st,
        password=_value_st,
        file_size=st.integers(0, 1 << 20),
        delay_seconds=st.integers(0, 60),
    ),
    st.builds(codec.DownloadResponse, status=st.integers(0, 1)),
    st.builds(
        codec.TransferComplete,
        command_key=_id_st,
        fault_code=st.sampled_from([0, 9010]),
        fault_string=_value_st,
        start_time=st.just("2026-08-18T10:00:00Z"),
        complete_time=st.just("2026-08-18T10:05:00Z"),
    ),
    st.builds(codec.GetRPCMethodsResponse, methods=st.lists(st.sampled_from(codec.CLIENT_IMPLEMENTED_RPCS), max_size=6).map(tuple)),
    st.builds(
        codec.Fault,
        code=st.sampled_from([9000, 9002, 9003, 9005]),
        string=_value_st,
        details=st.lists(
            st.builds(codec.ParamFault, path=_path_st, code=st.sampled_from([9005, 9007, 9008]), string=_value_st),
            max_size=2,
        ).map(tuple),
    ),
)

_envelope_st = st.builds(codec.RpcEnvelope, id=_id_st, body=_body_st)


@settings(max_examples=200, deadline=None)
@given(_envelope_st)
def test_encode_decode_round_trip(env):
    data = codec.encode(env)
    back = codec.decode(data, mode="strict")
    assert back == env
    assert codec.encode(back) == data


@settings(max_examples=50, deadline=None)
@given(_envelope_st)
def test_lenient_decode_of_clean_bytes_adds_no_notes(env):
    back = codec.decode(codec.encode(env), mode="lenient")
    assert back == env
    assert back.recovery_notes == ()


# ---------------------------------------------------------------------------
# Lenient recovery rules, one by one


def _sample() -> bytes:
    return codec.encode(
        codec.RpcEnvelope(id="n1", body=codec.SetParameterValuesResponse(status=0))
    )


class TestLenientRecovery:
    def test_control_byte(self):
        damaged = _sample().replace(b"<Status>0</Status>", b"<Status>0\x07</Status>")
        with pytest.raises(codec.DecodeError):
            codec.decode(damaged, mode="strict")
        env = codec.decode(damaged, mode="lenient")
        assert any("control byte" in n for n in env.recovery_notes)
        assert env.kind == "SetParameterValuesResponse"

    def test_closing_tag_attribute(self):
        damaged = _sample().replace(b"</Status>", b'</Status zombie="1">')
        with pytest.raises(codec.DecodeError):
            codec.decode(damaged, mode="strict")
        env = codec.decode(damaged, mode="lenient")
        assert any("closing tag" in n for n in env.recovery_notes)
        assert env.body.status == 0

    def test_bare_ampersand(self):
        original = codec.encode(
            codec.RpcEnvelope(id="n2", body=codec.Reboot(command_key="fish chips"))
        )
        damaged = original.replace(b"fish chips", b"fish & chips")
        with pytest.raises(codec.DecodeError):
            codec.decode(damaged, mode="strict")
        env = codec.decode(damaged, mode="lenient")
        assert env.body.command_key == "fish & chips"
        assert any("ampersand" in n for n in env.recovery_notes)

    def test_truncation_is_not_recoverable(self):
        damaged = codec.malform(_sample(), "truncate-tail")
        with pytest.raises(codec.DecodeError):
            codec.decode(damaged, mode="strict")
        with pytest.raises(codec.DecodeError):
            codec.decode(damaged, mode="lenient")

    def test_duplicate_root_close(self):
        damaged = codec.malform(_sample(), "duplicate-root-close")
        with pytest.raises(codec.DecodeError):
            codec.decode(damaged, mode="strict")
        env = codec.decode(damaged, mode="lenient")
        assert env.kind == "SetParameterValuesResponse"
        assert any("trailing bytes" in n for n in env.recovery_notes)


class TestEntityHandling:
    """No entity ever resolves, in either mode, no matter what is declared."""

    def test_undeclared_entity_stays_literal(self):
        data = _sample().replace(b"<Status>0</Status>", b"<Status>0&boom;</Status>")
        for mode in ("strict", "lenient"):
            env = codec.decode(data, mode=mode)
            assert env.body.status == 0  # int parse of "0&boom;" fails -> default path
        raw = codec.encode(codec.RpcEnvelope(id="e1", body=codec.Reboot(command_key="k")))
        raw = raw.replace(b"<CommandKey>k</CommandKey>", b"<CommandKey>k&boom;</CommandKey>")
        env = codec.decode(raw, mode="strict")
        assert env.body.command_key == "k&boom;"

    def test_internal_dtd_entity_never_resolves(self):
        raw = codec.encode(codec.RpcEnvelope(id="e2", body=codec.Reboot(command_key="k")))
        raw = raw.replace(b"<CommandKey>k</CommandKey>", b"<CommandKey>k&inject;</CommandKey>")
        raw = raw.replace(
            b'<?xml version="1.0" encoding="UTF-8"?>',
            b'<?xml version="1.0" encoding="UTF-8"?>\n<!DOCTYPE x [<!ENTITY inject "resolved">]>',
        )
        for mode in ("strict", "lenient"):
            env = codec.decode(raw, mode=mode)
            assert env.body.command_key == "k&inject;"
            assert "resolved" not in env.body.command_key

    def test_external_entity_never_reads_files(self, tmp_path):
        secret = tmp_path / "secret.txt"
        secret.write_text("TOP-SECRET")
        raw = codec.encode(codec.RpcEnvelope(id="e3", body=codec.Reboot(command_key="k")))
        raw = raw.replace(b"<CommandKey>k</CommandKey>", b"<CommandKey>k&ext;</CommandKey>")
        raw = raw.replace(
            b'<?xml version="1.0" encoding="UTF-8"?>',
            f'<?xml version="1.0" encoding="UTF-8"?>\n<!DOCTYPE x [<!ENTITY ext SYSTEM "file://{secret}">]>'.encode(),
        )
        env = codec.decode(raw, mode="strict")
        assert env.body.command_key == "k&ext;"
        assert "TOP-SECRET" not in codec.encode(env).decode()

    def test_builtin_entities_and_charrefs_decode_normally(self):
        env = codec.decode(
            codec.encode(codec.RpcEnvelope(id="e4", body=codec.Reboot(command_key="a<b>&cé"))),
            mode="strict",
        )
        assert env.body.command_key == "a<b>&cé"


class TestStructuralRules:
    def test_multiple_rpcs_in_one_body_rejected(self):
        data = _sample()
        inner = b"<cwmp:GetRPCMethods></cwmp:GetRPCMethods>"
        data = data.replace(b"</soap-env:Body>", inner + b"</soap-env:Body>")
        for mode in ("strict", "lenient"):
            with pytest.raises(codec.DecodeError):
                codec.decode(data, mode=mode)

    def test_empty_body_rejected(self):
        data = codec.encode(codec.RpcEnvelope(id="x", body=codec.GetRPCMethods()))
        start = data.index(b"<soap-env:Body>")
        end = data.index(b"</soap-env:Body>") + len(b"</soap-env:Body>")
        data = data[:start] + b"<soap-env:Body></soap-env:Body>" + data[end:]
        with pytest.raises(codec.DecodeError):
            codec.decode(data, mode="strict")

    def test_decode_error_carries_position(self):
        try:
            codec.decode(b"<a><b></a>", mode="strict")
        except codec.DecodeError as exc:
            assert exc.position is not None
        else:
            pytest.fail("expected DecodeError")

    def test_cwmp_namespace_variants_accepted(self):
        data = bootstrap_bytes().replace(b"urn:dslforum-org:cwmp-1-0", b"urn:dslforum-org:cwmp-1-2")
        env = codec.decode(data, mode="strict")
        assert env.kind == "Inform"
        assert env.cwmp_urn == "urn:dslforum-org:cwmp-1-2"
        assert b"urn:dslforum-org:cwmp-1-2" in codec.encode(env)


class TestRawVendor:
    def test_vendor_rpc_round_trips_byte_exact(self):
        vendor = b"<v:X_00040E_GetStats xmlns:v=\"urn:vendor:odd\"><Arg>1&#x20;2</Arg></v:X_00040E_GetStats>"
        data = _sample().replace(
            b"<cwmp:SetParameterValuesResponse>\n      <Status>0</Status>\n    </cwmp:SetParameterValuesResponse>",
            vendor,
        )
        env = codec.decode(data, mode="strict")
        assert env.kind == "RawVendor"
        assert env.body.name == "X_00040E_GetStats"
        assert env.body.raw == vendor
        reencoded = codec.encode(env)
        assert vendor in reencoded
        again = codec.decode(reencoded, mode="strict")
        assert again.body.raw == vendor

    def test_unencodable_vendor_body(self):
        env = codec.RpcEnvelope(id="v", body=codec.RawVendor(name="Broken", raw=b"<a><b>"))
        with pytest.raises(codec.UnencodableVendorBody):
            codec.encode(env)


class TestValidate:
    def test_first_message_must_be_inform(self):
        env = codec.RpcEnvelope(id="1", body=codec.GetRPCMethods())
        codes = [v.code for v in codec.validate(env, role="client", first_in_session=True)]
        assert "inform-first" in codes

    def test_direction_checks(self):
        spv = codec.RpcEnvelope(id="1", body=codec.SetParameterValues())
        assert any(v.code == "direction" for v in codec.validate(spv, role="client"))
        assert not any(v.code == "direction" for v in codec.validate(spv, role="acs"))
        inform = codec.decode(bootstrap_bytes(), mode="strict")
        assert any(v.code == "direction" for v in codec.validate(inform, role="acs"))

    def test_response_id_must_echo_request(self):
        req = codec.RpcEnvelope(id="abc", body=codec.Reboot(command_key="k"))
        good = codec.RpcEnvelope(id="abc", body=codec.RebootResponse())
        bad = codec.RpcEnvelope(id="zzz", body=codec.RebootResponse())
        assert codec.validate(good, role="client", in_response_to=req) == []
        assert any(v.code == "id-mismatch" for v in codec.validate(bad, role="client", in_response_to=req))

    def test_response_kind_must_pair(self):
        req = codec.RpcEnvelope(id="abc", body=codec.Reboot(command_key="k"))
        wrong = codec.RpcEnvelope(id="abc", body=codec.SetParameterValuesResponse())
        assert any(v.code == "pairing" for v in codec.validate(wrong, role="client", in_response_to=req))
        fault = codec.RpcEnvelope(id="abc", body=codec.Fault(code=9000, string="nope"))
        assert codec.validate(fault, role="client", in_response_to=req) == []

    def test_inform_rules(self):
        inform = codec.decode(bootstrap_bytes(), mode="strict")
        no_events = codec.RpcEnvelope(id="1", body=codec.Inform(device_id=inform.body.device_id, events=()))
        codes = [v.code for v in codec.validate(no_events, role="client", first_in_session=True)]
        assert "inform-empty-events" in codes
        bad_env = codec.RpcEnvelope(
            id="1",
            body=codec.Inform(device_id=inform.body.device_id, events=inform.body.events, max_envelopes=2),
        )
        codes = [v.code for v in codec.validate(bad_env, role="client")]
        assert "max-envelopes" in codes
        odd_event = codec.RpcEnvelope(
            id="1",
            body=codec.Inform(device_id=inform.body.device_id, events=(codec.EventEntry("9 MADE UP"),)),
        )
        codes = [v.code for v in codec.validate(odd_event, role="client")]
        assert "unknown-event-code" in codes
        vendor_event = codec.RpcEnvelope(
            id="1",
            body=codec.Inform(device_id=inform.body.device_id, events=(codec.EventEntry("X 00040E ODD"),)),
        )
        assert not any(v.code == "unknown-event-code" for v in codec.validate(vendor_event, role="client"))

    def test_requests_need_ids(self):
        env = codec.RpcEnvelope(id="", body=codec.Reboot(command_key="k"))
        assert any(v.code == "missing-id" for v in codec.validate(env, role="acs"))


class TestMalformCatalog:
    def test_catalog_is_complete_and_deterministic(self):
        data = bootstrap_bytes()
        assert len(codec.MALFORMATIONS) == 5
        for kind in codec.MALFORMATIONS:
            one = codec.malform(data, kind)
            two = codec.malform(data, kind)
            assert one == two
            assert one != data

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            codec.malform(b"<a/>", "nonsense")

    def test_content_type_constant(self):
        assert codec.CONTENT_TYPE == 'text/xml; charset="utf-8"'
