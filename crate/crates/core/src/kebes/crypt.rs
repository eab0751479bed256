//! The crypt layer: an encrypted, message-based channel over any byte
//! transport. Keys come from an unauthenticated Diffie-Hellman exchange (no
//! pre-shared secrets, deliberately no man-in-the-middle resistance), frames
//! are AES-256-CBC with a fresh IV, and every message is compressed at a
//! random level and padded by a random amount to obfuscate lengths. There is
//! no integrity tag; corruption surfaces as body-structure validation
//! failure, which tears the session down.
//!
//! Wire format:
//!   handshake  = [4-byte BE length | big-endian DH public value]
//!   frame      = [4-byte BE ciphertext length | 16-byte IV | ciphertext]
//!   body       = [level:1 | payload_len:4 BE | DEFLATE(payload) | pad]
//! where payload_len is the byte length of the DEFLATE stream and pad is
//! random filler (the length draw is 0..=255, plus up to 15 bytes of cipher
//! block filler).

use std::io::{Read, Write};

use aes::cipher::{block_padding::NoPadding, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use num_bigint::BigUint;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

type Aes256CbcEnc = cbc::Encryptor<aes::Aes256>;
type Aes256CbcDec = cbc::Decryptor<aes::Aes256>;

/// 2048-bit MODP group (well-known group 14), generator 2.
const DH_PRIME_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74",
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437",
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED",
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05",
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB",
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B",
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718",
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
);

const DH_PUBLIC_BYTES: usize = 256;
/// Random pad draw is 0..=255; cipher block filler can add up to 15 more.
pub const MAX_PAD: usize = 255 + 15;
const MAX_BODY: usize = 1 << 24;

pub fn dh_prime() -> BigUint {
    BigUint::parse_bytes(DH_PRIME_HEX.as_bytes(), 16).expect("group constant parses")
}

fn derive_key(shared: &BigUint) -> [u8; 32] {
    let mut fixed = [0u8; DH_PUBLIC_BYTES];
    let raw = shared.to_bytes_be();
    fixed[DH_PUBLIC_BYTES - raw.len()..].copy_from_slice(&raw);
    let mut h = Sha256::new();
    h.update(fixed);
    h.finalize().into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

#[derive(Clone)]
pub struct CryptSession {
    pub role: Role,
    rng: ChaCha12Rng,
    dh_private: BigUint,
    pub dh_public: BigUint,
    pub peer_public: Option<BigUint>,
    key: Option<[u8; 32]>,
    pub send_counter: u64,
    pub recv_counter: u64,
    pub poisoned: bool,
}

impl CryptSession {
    pub fn new(role: Role, entropy_seed: [u8; 32]) -> CryptSession {
        let mut rng = ChaCha12Rng::from_seed(entropy_seed);
        let p = dh_prime();
        let mut raw = [0u8; DH_PUBLIC_BYTES];
        rng.fill_bytes(&mut raw);
        let two = BigUint::from(2u32);
        let private = BigUint::from_bytes_be(&raw) % (&p - 3u32) + &two;
        let public = two.modpow(&private, &p);
        CryptSession {
            role,
            rng,
            dh_private: private,
            dh_public: public,
            peer_public: None,
            key: None,
            send_counter: 0,
            recv_counter: 0,
            poisoned: false,
        }
    }

    pub fn established(&self) -> bool {
        self.key.is_some()
    }

    pub fn shared_key(&self) -> Option<[u8; 32]> {
        self.key
    }

    /// The clear-text handshake message carrying this side's public value.
    pub fn handshake_message(&self) -> Vec<u8> {
        let raw = self.dh_public.to_bytes_be();
        let mut out = Vec::with_capacity(4 + raw.len());
        out.extend_from_slice(&(raw.len() as u32).to_be_bytes());
        out.extend_from_slice(&raw);
        out
    }

    /// Take the peer's public value (payload of its handshake message) and
    /// derive the shared key. Out-of-group values are rejected.
    pub fn absorb_peer(&mut self, public_bytes: &[u8]) -> Result<()> {
        let p = dh_prime();
        let peer = BigUint::from_bytes_be(public_bytes);
        let two = BigUint::from(2u32);
        if peer < two || peer > &p - 2u32 {
            return Err(Error::Handshake("peer public value out of group range".into()));
        }
        let shared = peer.modpow(&self.dh_private, &p);
        self.key = Some(derive_key(&shared));
        self.peer_public = Some(peer);
        Ok(())
    }

    /// Compress at a random level, pad by a random amount, encrypt under a
    /// fresh IV, and frame.
    pub fn seal(&mut self, plaintext: &[u8]) -> Result<Vec<u8>> {
        let key = self.key.ok_or_else(|| Error::State("seal before handshake".into()))?;
        if self.poisoned {
            return Err(Error::Channel("session torn down".into()));
        }
        let level = self.rng.gen_range(0..=9u32);
        let pad_len = self.rng.gen_range(0..=255usize);

        let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(level));
        enc.write_all(plaintext)?;
        let compressed = enc.finish()?;

        let mut body = Vec::with_capacity(5 + compressed.len() + pad_len + 16);
        body.push(level as u8);
        body.extend_from_slice(&(compressed.len() as u32).to_be_bytes());
        body.extend_from_slice(&compressed);
        let mut pad = vec![0u8; pad_len];
        self.rng.fill_bytes(&mut pad);
        body.extend_from_slice(&pad);
        let fill = (16 - body.len() % 16) % 16;
        let mut filler = vec![0u8; fill];
        self.rng.fill_bytes(&mut filler);
        body.extend_from_slice(&filler);

        let mut iv = [0u8; 16];
        self.rng.fill_bytes(&mut iv);
        let ciphertext = Aes256CbcEnc::new(&key.into(), &iv.into()).encrypt_padded_vec_mut::<NoPadding>(&body);

        let mut frame = Vec::with_capacity(4 + 16 + ciphertext.len());
        frame.extend_from_slice(&(ciphertext.len() as u32).to_be_bytes());
        frame.extend_from_slice(&iv);
        frame.extend_from_slice(&ciphertext);
        self.send_counter += 1;
        Ok(frame)
    }

    /// Decrypt and validate one complete frame. Any structural failure
    /// poisons the session.
    pub fn open(&mut self, frame: &[u8]) -> Result<Vec<u8>> {
        let key = self.key.ok_or_else(|| Error::State("open before handshake".into()))?;
        if self.poisoned {
            return Err(Error::Channel("session torn down".into()));
        }
        let (iv, ciphertext) = parse_frame(frame)?;
        let body = match Aes256CbcDec::new(&key.into(), &iv.into()).decrypt_padded_vec_mut::<NoPadding>(ciphertext)
        {
            Ok(b) => b,
            Err(_) => {
                self.poisoned = true;
                return Err(Error::Channel("undecryptable frame".into()));
            }
        };
        match validate_body(&body) {
            Ok(payload) => {
                self.recv_counter += 1;
                Ok(payload)
            }
            Err(e) => {
                self.poisoned = true;
                Err(Error::Channel(format!("invalid body structure: {e}")))
            }
        }
    }
}

/// Split a complete frame into IV and ciphertext, checking the framing
/// exactly. Truncated or oversized buffers are framing errors.
pub fn parse_frame(frame: &[u8]) -> Result<([u8; 16], &[u8])> {
    if frame.len() < 20 {
        return Err(Error::Framing("frame shorter than header".into()));
    }
    let ct_len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
    if frame.len() != 4 + 16 + ct_len {
        return Err(Error::Framing(format!("frame length {} != header promise {}", frame.len(), 4 + 16 + ct_len)));
    }
    if ct_len == 0 || !ct_len.is_multiple_of(16) {
        return Err(Error::Framing(format!("ciphertext length {ct_len} not a positive block multiple")));
    }
    let mut iv = [0u8; 16];
    iv.copy_from_slice(&frame[4..20]);
    Ok((iv, &frame[20..]))
}

/// Structure validation of a decrypted body, independent of session state:
/// level in 0..=9, a consistent compressed length, a bounded pad, and a
/// DEFLATE stream that inflates cleanly. Exposed for the corruption oracle.
pub fn validate_body(body: &[u8]) -> Result<Vec<u8>> {
    if body.len() < 5 {
        return Err(Error::Encoding("body shorter than header".into()));
    }
    let level = body[0];
    if level > 9 {
        return Err(Error::Encoding(format!("compression level {level} out of range")));
    }
    let comp_len = u32::from_be_bytes(body[1..5].try_into().unwrap()) as usize;
    if comp_len > body.len() - 5 {
        return Err(Error::Encoding("compressed length exceeds body".into()));
    }
    let pad_len = body.len() - 5 - comp_len;
    if pad_len > MAX_PAD {
        return Err(Error::Encoding(format!("pad of {pad_len} bytes exceeds maximum")));
    }
    let mut decoder = DeflateDecoder::new(&body[5..5 + comp_len]).take(MAX_BODY as u64 + 1);
    let mut payload = Vec::new();
    decoder
        .read_to_end(&mut payload)
        .map_err(|e| Error::Encoding(format!("inflate failed: {e}")))?;
    if payload.len() > MAX_BODY {
        return Err(Error::Encoding("payload exceeds size bound".into()));
    }
    Ok(payload)
}

/// Incremental splitter for the two message shapes that share the 4-byte BE
/// length prefix: handshake messages (no extra) and crypt frames (16 IV
/// bytes between prefix and counted ciphertext).
#[derive(Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    fn next_message(&mut self, extra: usize) -> Option<Vec<u8>> {
        if self.buf.len() < 4 {
            return None;
        }
        let n = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
        let total = 4 + extra + n;
        if self.buf.len() < total {
            return None;
        }
        let msg = self.buf[..total].to_vec();
        self.buf.drain(..total);
        Some(msg)
    }

    pub fn next_handshake(&mut self) -> Option<Vec<u8>> {
        self.next_message(0)
    }

    pub fn next_frame(&mut self) -> Option<Vec<u8>> {
        self.next_message(16)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (CryptSession, CryptSession) {
        let mut client = CryptSession::new(Role::Client, [1u8; 32]);
        let mut server = CryptSession::new(Role::Server, [2u8; 32]);
        let c_hello = client.handshake_message();
        let s_hello = server.handshake_message();
        server.absorb_peer(&c_hello[4..]).unwrap();
        client.absorb_peer(&s_hello[4..]).unwrap();
        (client, server)
    }

    #[test]
    fn handshake_derives_identical_keys() {
        let (client, server) = pair();
        assert!(client.established() && server.established());
        assert_eq!(client.shared_key(), server.shared_key());
    }

    #[test]
    fn out_of_group_publics_are_rejected() {
        let mut s = CryptSession::new(Role::Server, [3u8; 32]);
        assert!(matches!(s.absorb_peer(&[0u8; 32]), Err(Error::Handshake(_))));
        assert!(matches!(s.absorb_peer(&[1]), Err(Error::Handshake(_))));
        let p_minus_1 = (dh_prime() - 1u32).to_bytes_be();
        assert!(matches!(s.absorb_peer(&p_minus_1), Err(Error::Handshake(_))));
    }

    #[test]
    fn seal_open_roundtrips() {
        let (mut client, mut server) = pair();
        for msg in [&b""[..], b"x", b"hello world", &[0u8; 4096]] {
            let frame = client.seal(msg).unwrap();
            assert_eq!(server.open(&frame).unwrap(), msg);
        }
        assert_eq!(client.send_counter, 4);
        assert_eq!(server.recv_counter, 4);
    }

    #[test]
    fn repeated_seals_vary_frame_length() {
        let (mut client, _server) = pair();
        let msg = vec![0x41u8; 1024];
        let lengths: std::collections::BTreeSet<usize> =
            (0..20).map(|_| client.seal(&msg).unwrap().len()).collect();
        assert!(lengths.len() >= 2, "all 20 frames had identical length");
    }

    #[test]
    fn wrong_key_frames_are_channel_errors() {
        let (mut client, _) = pair();
        let mut other = CryptSession::new(Role::Server, [9u8; 32]);
        let hello = CryptSession::new(Role::Client, [8u8; 32]).handshake_message();
        other.absorb_peer(&hello[4..]).unwrap();
        let frame = client.seal(b"secret").unwrap();
        assert!(matches!(other.open(&frame), Err(Error::Channel(_))));
        assert!(other.poisoned);
        assert!(matches!(other.seal(b"more"), Err(Error::Channel(_))));
    }

    #[test]
    fn truncated_frames_are_framing_errors() {
        let (mut client, _) = pair();
        let frame = client.seal(b"data").unwrap();
        assert!(matches!(parse_frame(&frame[..frame.len() - 1]), Err(Error::Framing(_))));
        assert!(matches!(parse_frame(&frame[..10]), Err(Error::Framing(_))));
        assert!(parse_frame(&frame).is_ok());
    }

    #[test]
    fn active_relay_decrypts_both_directions() {
        // The deliberate weakness: an adversary holding both half-sessions
        // reads everything.
        let mut client = CryptSession::new(Role::Client, [1u8; 32]);
        let mut server = CryptSession::new(Role::Server, [2u8; 32]);
        let mut mitm_toward_client = CryptSession::new(Role::Server, [6u8; 32]);
        let mut mitm_toward_server = CryptSession::new(Role::Client, [7u8; 32]);

        mitm_toward_client.absorb_peer(&client.handshake_message()[4..]).unwrap();
        client.absorb_peer(&mitm_toward_client.handshake_message()[4..]).unwrap();
        server.absorb_peer(&mitm_toward_server.handshake_message()[4..]).unwrap();
        mitm_toward_server.absorb_peer(&server.handshake_message()[4..]).unwrap();

        let frame = client.seal(b"give me /etc/shadow").unwrap();
        let seen = mitm_toward_client.open(&frame).unwrap();
        assert_eq!(seen, b"give me /etc/shadow");
        let relayed = mitm_toward_server.seal(&seen).unwrap();
        assert_eq!(server.open(&relayed).unwrap(), b"give me /etc/shadow");
    }

    #[test]
    fn corruption_fuzz_parser_never_accepts_invalid_bodies() {
        use rand::Rng;
        let (mut client, server_proto) = pair();
        let key = server_proto.shared_key().unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1234);
        let mut rejected = 0usize;
        let mut accepted = 0usize;
        for i in 0..1000 {
            // Mix compressible and incompressible payloads; the former
            // deflate to coded blocks, the latter to stored blocks.
            let n = rng.gen_range(1..1200usize);
            let msg: Vec<u8> = if i % 2 == 0 {
                (0..n).map(|_| rng.gen()).collect()
            } else {
                b"cd /tmp && ./tool --scan ".iter().copied().cycle().take(n).collect()
            };
            let mut frame = client.seal(&msg).unwrap();
            let at = rng.gen_range(20..frame.len());
            let bit = 1u8 << rng.gen_range(0..8);
            frame[at] ^= bit;

            // A fresh session per attempt, same key, so poisoning does not
            // leak across iterations.
            let mut victim = server_proto.clone();
            match victim.open(&frame) {
                Err(_) => rejected += 1,
                Ok(payload) => {
                    // Dual route: independently decrypt and re-validate. The
                    // parser may only accept what the validator accepts.
                    // Surviving as garbage is allowed (no integrity tag);
                    // silent acceptance of an invalid structure is not.
                    let (iv, ct) = parse_frame(&frame).unwrap();
                    let body = Aes256CbcDec::new(&key.into(), &iv.into())
                        .decrypt_padded_vec_mut::<NoPadding>(ct)
                        .expect("block-aligned");
                    let independent = validate_body(&body).expect("parser accepted a body the validator rejects");
                    assert_eq!(independent, payload);
                    accepted += 1;
                }
            }
        }
        assert_eq!(rejected + accepted, 1000);
        assert!(rejected > 100, "structure validation looks vacuous: {rejected}/1000 rejected");

        // Deterministic spot check: corrupting the first ciphertext block
        // garbles the level/length header and must always reject.
        let frame = client.seal(b"header corruption check").unwrap();
        for at in 20..36 {
            let mut bad = frame.clone();
            bad[at] ^= 0x80;
            let mut victim = server_proto.clone();
            assert!(victim.open(&bad).is_err(), "header-block corruption at {at} accepted");
        }
    }
}
