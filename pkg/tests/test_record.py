import pytest
from hypothesis import given, settings, strategies as st

from sdp.errors import AuthFailure, Oversize, ReplayedRecord
from sdp.record import SealedRecord, SessionKeys, derive_nonce, open_segment, seal_segment
from sdp.wire import RECORD_HEADER_LEN, TAG_LEN, RecordHeader

# AES-128-GCM known-answer vector (GCM reference test case 4: 60-byte plaintext, 20-byte AAD).
KAT_K = bytes.fromhex("feffe9928665731c6d6a8f9467308308")
KAT_IV = bytes.fromhex("cafebabefacedbaddecaf888")
KAT_P = bytes.fromhex(
    "d9313225f88406e5a55909c5aff5269a86a7a9531534f7da2e4c303d8a318a72"
    "1c3c0c95956809532fcf0e2449a6b525b16aedf5aa0de657ba637b39")
KAT_A = bytes.fromhex("feedfacedeadbeeffeedfacedeadbeefabaddad2")
KAT_C = bytes.fromhex(
    "42831ec2217774244b7221b784d0d49ce3aa212f2c02a4e035c17e2329aca12e"
    "21d514b25466931c7d8f6a5aac84aa051ba30b396a0aac973d58e091")
KAT_T = bytes.fromhex("5bc94fbc3221a5db94fae95ae7121a47")


def keys():
    return SessionKeys(bytes(range(16)), bytes(range(12)))


def test_known_answer():
    rec = seal_segment(SessionKeys(KAT_K, KAT_IV), 0, KAT_P, aad=KAT_A)
    assert rec.ciphertext == KAT_C
    assert rec.tag == KAT_T
    assert open_segment(SessionKeys(KAT_K, KAT_IV), rec, aad=KAT_A) == KAT_P


def test_nonce_is_iv_xor_seq():
    iv = bytes.fromhex("000102030405060708090a0b")
    assert derive_nonce(iv, 0) == iv
    assert derive_nonce(iv, 0x0F) == bytes.fromhex("000102030405060708090a04")
    assert derive_nonce(iv, 1 << 63) == bytes.fromhex("000102038405060708090a0b")


@settings(max_examples=50)
@given(st.binary(max_size=4096), st.integers(0, (1 << 64) - 1))
def test_roundtrip_preserves_length(pt, seq):
    rec = seal_segment(keys(), seq, pt)
    raw = rec.to_bytes()
    assert len(raw) == RECORD_HEADER_LEN + len(pt) + TAG_LEN
    assert rec.header.explicit_sequence == seq
    assert open_segment(keys(), SealedRecord.from_bytes(raw)) == pt


def test_bit_flip_fails_auth():
    raw = bytearray(seal_segment(keys(), 7, b"x" * 100).to_bytes())
    for pos in (0, 5, RECORD_HEADER_LEN, len(raw) - 1):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises(AuthFailure):
            open_segment(keys(), SealedRecord.from_bytes(bytes(bad)))


def test_wrong_sequence_in_header_fails():
    rec = seal_segment(keys(), 4, b"payload", header=RecordHeader.for_plaintext(7, 5))
    with pytest.raises(AuthFailure):
        open_segment(keys(), rec)


def test_replay_rejected_after_auth():
    k = keys()
    rec = seal_segment(keys(), 1, b"abc")
    open_segment(k, rec)
    with pytest.raises(ReplayedRecord):
        open_segment(k, rec)


def test_oversize():
    with pytest.raises(Oversize):
        seal_segment(keys(), 0, bytes(0xFFFF - TAG_LEN + 1))
    seal_segment(keys(), 0, bytes(0xFFFF - TAG_LEN))


def test_allocate_is_consecutive():
    k = keys()
    assert k.allocate(3) == 0
    assert k.allocate() == 3
    assert k.tx_record_seq == 4
