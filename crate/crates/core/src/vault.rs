//! The container scheme: bit-splitting the final state, key derivation, F2
//! and payload encryption, the `PCV1` container format, and the encrypt and
//! two-phase decrypt flows.

use std::time::{Duration, Instant};

use aes::Aes256;
use aes_gcm::aead::consts::U16;
use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::AesGcm;
use ctr::cipher::{KeyIvInit, StreamCipher};
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use zeroize::{Zeroize, ZeroizeOnDrop, Zeroizing};

use crate::analysis::{recovery_fidelity, RECOVERY_THRESHOLD};
use crate::attack::TemplateOracle;
use crate::error::{Error, Result};
use crate::glyphs::{generate_sk, imprint_conserving, layout_masks, Charset, Deformation, GrayImage, StrongKey};
use crate::lattice::{thermalize, LatticeState, SignField, SimParams};

pub const MAGIC: &[u8; 4] = b"PCV1";
pub const FORMAT_VERSION: u16 = 1;
/// Fixed header size in bytes, up to and including the three section lengths.
pub const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 8 + 8 + 1 + 1 + 4 + 16 + 16 + 16 + 8 * 3;
pub const TAG_LEN: usize = 16;
/// PBKDF2-HMAC-SHA256 iterations; measured at about 100 ms per evaluation
/// on one current x86-64 core.
pub const DEFAULT_KDF_WORK: u32 = 600_000;
/// About one thermalization in six yields a legible ISK that also survives
/// the loopback at the default parameters; 32 attempts fail with
/// probability below 1%.
pub const SELF_CHECK_ATTEMPTS: u32 = 32;
pub const DEFAULT_SESSION_TTL: Duration = Duration::from_secs(600);

type Aes256Ctr = ctr::Ctr128BE<Aes256>;
type Aes256Gcm16 = AesGcm<Aes256, U16>;

/// The two halves of a final state: F1 holds the high 32 bits of every
/// binary64 value, F2 the low 32 bits. Planes are u then p, row-major,
/// little-endian words.
#[derive(Clone, PartialEq, Eq)]
pub struct SplitState {
    pub n: usize,
    pub f1: Vec<u8>,
    pub f2: Vec<u8>,
}

impl std::fmt::Debug for SplitState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SplitState")
            .field("n", &self.n)
            .field("f1_len", &self.f1.len())
            .field("f2_len", &self.f2.len())
            .finish()
    }
}

pub fn half_len(n: usize) -> usize {
    n * n * 2 * 4
}

pub fn split_state(fs: &LatticeState) -> SplitState {
    let n = fs.n();
    let mut f1 = Vec::with_capacity(half_len(n));
    let mut f2 = Vec::with_capacity(half_len(n));
    for v in fs.u.iter().chain(&fs.p) {
        let bits = v.to_bits();
        f1.extend_from_slice(&((bits >> 32) as u32).to_le_bytes());
        f2.extend_from_slice(&(bits as u32).to_le_bytes());
    }
    SplitState { n, f1, f2 }
}

pub fn merge_state(split: &SplitState, params: SimParams) -> Result<LatticeState> {
    let expected = half_len(params.n);
    for got in [split.f1.len(), split.f2.len()] {
        if got != expected {
            return Err(Error::LengthMismatch { expected, got });
        }
    }
    let values: Vec<f64> = split
        .f1
        .chunks_exact(4)
        .zip(split.f2.chunks_exact(4))
        .map(|(hi, lo)| {
            let hi = u32::from_le_bytes(hi.try_into().unwrap()) as u64;
            let lo = u32::from_le_bytes(lo.try_into().unwrap()) as u64;
            f64::from_bits(hi << 32 | lo)
        })
        .collect();
    let sites = params.n * params.n;
    let (u, p) = values.split_at(sites);
    LatticeState::from_planes(params, u.to_vec(), p.to_vec())
}

#[derive(Clone, Zeroize, ZeroizeOnDrop)]
pub struct KeyMaterial {
    pub k2: [u8; 32],
    pub ek: Option<[u8; 32]>,
}

impl std::fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("KeyMaterial { .. }")
    }
}

fn pbkdf(secret: &[u8], label: &[u8], salt: &[u8; 16], work: u32) -> [u8; 32] {
    let mut labelled = Vec::with_capacity(label.len() + 1 + salt.len());
    labelled.extend_from_slice(label);
    labelled.push(0);
    labelled.extend_from_slice(salt);
    let mut out = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<Sha256>(secret, &labelled, work.max(1), &mut out);
    out
}

/// K2 from the short password alone, EK from password and strong key together.
pub fn derive_keys(sp: &str, sk: Option<&str>, salt: &[u8; 16], work: u32) -> Result<KeyMaterial> {
    if sp.is_empty() {
        return Err(Error::EmptyPassword);
    }
    if work == 0 {
        return Err(Error::InvalidParams("KDF work factor must be positive".into()));
    }
    let k2 = pbkdf(sp.as_bytes(), b"F2", salt, work);
    let ek = sk.map(|sk| {
        let mut joint = Zeroizing::new(Vec::with_capacity(sp.len() + 1 + sk.len()));
        joint.extend_from_slice(sp.as_bytes());
        joint.push(0);
        joint.extend_from_slice(sk.as_bytes());
        pbkdf(&joint, b"DATA", salt, work)
    });
    Ok(KeyMaterial { k2, ek })
}

/// AES-256-CTR with no tag: any key produces a well-formed F2.
pub fn encrypt_f2(f2: &[u8], k2: &[u8; 32], nonce: &[u8; 16]) -> Vec<u8> {
    let mut out = f2.to_vec();
    Aes256Ctr::new(k2.into(), nonce.into()).apply_keystream(&mut out);
    out
}

pub fn decrypt_f2(ef2: &[u8], k2: &[u8; 32], nonce: &[u8; 16]) -> Vec<u8> {
    encrypt_f2(ef2, k2, nonce)
}

/// AES-256-GCM with a 16-byte nonce; `aad` binds the container header.
pub fn seal_data(data: &[u8], ek: &[u8; 32], nonce: &[u8; 16], aad: &[u8]) -> Vec<u8> {
    Aes256Gcm16::new(ek.into())
        .encrypt(nonce.into(), Payload { msg: data, aad })
        .expect("GCM encryption of an in-memory buffer cannot fail")
}

pub fn open_data(ed: &[u8], ek: &[u8; 32], nonce: &[u8; 16], aad: &[u8]) -> Result<Vec<u8>> {
    Aes256Gcm16::new(ek.into())
        .decrypt(nonce.into(), Payload { msg: ed, aad })
        .map_err(|_| Error::AuthFailure)
}

#[derive(Clone, PartialEq, Eq)]
pub struct VaultContainer {
    pub version: u16,
    pub n: u16,
    pub tau_steps: u32,
    pub h_bits: u64,
    pub temperature_bits: u64,
    pub charset_id: u8,
    pub sk_len: u8,
    pub kdf_work: u32,
    pub salt: [u8; 16],
    pub nonce_f2: [u8; 16],
    pub nonce_d: [u8; 16],
    pub ed: Vec<u8>,
    pub f1: Vec<u8>,
    pub ef2: Vec<u8>,
}

impl std::fmt::Debug for VaultContainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VaultContainer")
            .field("version", &self.version)
            .field("n", &self.n)
            .field("tau_steps", &self.tau_steps)
            .field("h", &f64::from_bits(self.h_bits))
            .field("temperature", &f64::from_bits(self.temperature_bits))
            .field("charset_id", &self.charset_id)
            .field("sk_len", &self.sk_len)
            .field("kdf_work", &self.kdf_work)
            .field("ed_len", &self.ed.len())
            .finish_non_exhaustive()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedContainer(format!("truncated at {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const K: usize>(&mut self, what: &str) -> Result<[u8; K]> {
        Ok(self.take(K, what)?.try_into().unwrap())
    }
}

impl VaultContainer {
    /// Physics parameters as stored; burn-in is not needed to decrypt.
    pub fn params(&self) -> Result<SimParams> {
        let params = SimParams {
            n: self.n as usize,
            h: f64::from_bits(self.h_bits),
            temperature: f64::from_bits(self.temperature_bits),
            tau_steps: self.tau_steps as u64,
            ..SimParams::default()
        };
        params
            .validate()
            .map_err(|e| Error::MalformedContainer(format!("header parameters: {e}")))?;
        Ok(params)
    }

    pub fn header_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.tau_steps.to_le_bytes());
        out.extend_from_slice(&self.h_bits.to_le_bytes());
        out.extend_from_slice(&self.temperature_bits.to_le_bytes());
        out.push(self.charset_id);
        out.push(self.sk_len);
        out.extend_from_slice(&self.kdf_work.to_le_bytes());
        out.extend_from_slice(&self.salt);
        out.extend_from_slice(&self.nonce_f2);
        out.extend_from_slice(&self.nonce_d);
        for len in [self.ed.len(), self.f1.len(), self.ef2.len()] {
            out.extend_from_slice(&(len as u64).to_le_bytes());
        }
        out
    }

    /// Header without the section lengths; authenticated as GCM associated data.
    fn aad(&self) -> Vec<u8> {
        let mut h = self.header_bytes();
        h.truncate(HEADER_LEN - 24);
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header_bytes();
        out.reserve(self.ed.len() + self.f1.len() + self.ef2.len());
        out.extend_from_slice(&self.ed);
        out.extend_from_slice(&self.f1);
        out.extend_from_slice(&self.ef2);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::MalformedContainer("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != FORMAT_VERSION {
            return Err(Error::MalformedContainer(format!("unsupported version {version}")));
        }
        let n = u16::from_le_bytes(r.array("N")?);
        let tau_steps = u32::from_le_bytes(r.array("tau")?);
        let h_bits = u64::from_le_bytes(r.array("h")?);
        let temperature_bits = u64::from_le_bytes(r.array("T")?);
        let [charset_id] = r.array("charset id")?;
        let [sk_len] = r.array("sk length")?;
        let kdf_work = u32::from_le_bytes(r.array("kdf work")?);
        let salt = r.array("salt")?;
        let nonce_f2 = r.array("F2 nonce")?;
        let nonce_d = r.array("data nonce")?;
        let mut lens = [0usize; 3];
        for (len, what) in lens.iter_mut().zip(["ED length", "F1 length", "EF2 length"]) {
            let raw = u64::from_le_bytes(r.array(what)?);
            *len = usize::try_from(raw).map_err(|_| Error::MalformedContainer(format!("{what} too large")))?;
        }
        let expected = half_len(n as usize);
        if lens[1] != expected || lens[2] != expected {
            return Err(Error::MalformedContainer(format!(
                "state sections {}/{} bytes, expected {expected} for N={n}",
                lens[1], lens[2]
            )));
        }
        if lens[0] < TAG_LEN {
            return Err(Error::MalformedContainer("data section shorter than its tag".into()));
        }
        let ed = r.take(lens[0], "ED")?.to_vec();
        let f1 = r.take(lens[1], "F1")?.to_vec();
        let ef2 = r.take(lens[2], "EF2")?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::MalformedContainer(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let container = Self {
            version,
            n,
            tau_steps,
            h_bits,
            temperature_bits,
            charset_id,
            sk_len,
            kdf_work,
            salt,
            nonce_f2,
            nonce_d,
            ed,
            f1,
            ef2,
        };
        container.params()?;
        if kdf_work == 0 {
            return Err(Error::MalformedContainer("zero KDF work factor".into()));
        }
        Ok(container)
    }
}

#[derive(Debug, Clone)]
pub struct EncryptConfig {
    pub params: SimParams,
    pub charset: Charset,
    pub key_len: usize,
    pub kdf_work: u32,
    /// Thermalizations tried before giving up.
    pub attempts: u32,
}

impl Default for EncryptConfig {
    fn default() -> Self {
        Self {
            params: SimParams::default(),
            charset: Charset::default_v1(),
            key_len: crate::glyphs::DEFAULT_KEY_LEN,
            kdf_work: DEFAULT_KDF_WORK,
            attempts: SELF_CHECK_ATTEMPTS,
        }
    }
}

/// What the encryption-time self-check observed on the accepted attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptReport {
    pub attempts: u32,
    pub mask_fidelity: f64,
    pub decoded_score: f64,
}

/// Outcome of one imprint-and-loopback attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    /// Oracle reading of the freshly imprinted state.
    pub isk_decoded: String,
    /// Mask fidelity after the loopback; `None` when the ISK was already
    /// illegible and the loopback was skipped.
    pub mask_fidelity: Option<f64>,
    /// Oracle reading of the restored state.
    pub decoded: String,
    pub score: f64,
}

impl SelfCheck {
    pub fn passed(&self, sk: &str) -> bool {
        self.mask_fidelity.is_some_and(|f| f >= RECOVERY_THRESHOLD) && self.decoded == sk
    }
}

/// Thermalizes, imprints `sk`, and checks that the ISK reads as `sk`, survives
/// the loopback, and still reads as `sk` afterwards. Returns the forward
/// (final) state when the loopback was run.
pub fn imprint_and_check(
    params: SimParams,
    sk: &StrongKey,
    oracle: &TemplateOracle,
    thermal_seed: u64,
    deform_seed: u64,
) -> Result<(Option<LatticeState>, SelfCheck)> {
    let state = thermalize(params, thermal_seed)?;
    let mask = layout_masks(sk, params.n, Deformation::Seeded(deform_seed))?;
    let (isk, _) = imprint_conserving(&state, &mask)?;
    let origin = isk.sign_field();
    let first = oracle.decode_field(&origin);
    if first.text != sk.as_str() {
        return Ok((
            None,
            SelfCheck {
                isk_decoded: first.text.clone(),
                mask_fidelity: None,
                decoded: first.text,
                score: first.score,
            },
        ));
    }
    let mut fs = isk;
    fs.integrate(params.tau_steps)?;
    let mut back = fs.clone();
    back.time_reverse();
    back.integrate(params.tau_steps)?;
    let restored = back.sign_field();
    let recognition = oracle.decode_field(&restored);
    Ok((
        Some(fs),
        SelfCheck {
            isk_decoded: first.text,
            mask_fidelity: Some(recovery_fidelity(&restored, &origin, Some(&mask))?),
            decoded: recognition.text,
            score: recognition.score,
        },
    ))
}

/// Seals `data` behind a final state that already carries `sk`.
pub fn seal_container<R: RngCore + CryptoRng>(
    data: &[u8],
    sp: &str,
    sk: &StrongKey,
    fs: &LatticeState,
    charset_id: u8,
    kdf_work: u32,
    rng: &mut R,
) -> Result<VaultContainer> {
    let params = fs.params;
    let tau_steps = u32::try_from(params.tau_steps)
        .map_err(|_| Error::InvalidParams(format!("tau of {} steps does not fit the header", params.tau_steps)))?;
    let mut salt = [0u8; 16];
    let mut nonce_f2 = [0u8; 16];
    let mut nonce_d = [0u8; 16];
    for buf in [&mut salt, &mut nonce_f2, &mut nonce_d] {
        rng.try_fill_bytes(buf).map_err(|_| Error::EntropyUnavailable)?;
    }
    let keys = derive_keys(sp, Some(sk.as_str()), &salt, kdf_work)?;
    let split = split_state(fs);
    let mut container = VaultContainer {
        version: FORMAT_VERSION,
        n: params.n as u16,
        tau_steps,
        h_bits: params.h.to_bits(),
        temperature_bits: params.temperature.to_bits(),
        charset_id,
        sk_len: sk.len() as u8,
        kdf_work,
        salt,
        nonce_f2,
        nonce_d,
        ed: Vec::new(),
        ef2: encrypt_f2(&split.f2, &keys.k2, &nonce_f2),
        f1: split.f1,
    };
    let ek = keys.ek.as_ref().expect("EK derived with sk present");
    container.ed = seal_data(data, ek, &nonce_d, &container.aad());
    Ok(container)
}

/// Full encryption: a fresh strong key is drawn, imprinted and self-checked
/// (with re-thermalization on failure), then discarded after sealing.
pub fn encrypt_flow<R: RngCore + CryptoRng>(
    data: &[u8],
    sp: &str,
    config: &EncryptConfig,
    rng: &mut R,
) -> Result<(VaultContainer, EncryptReport)> {
    if sp.is_empty() {
        return Err(Error::EmptyPassword);
    }
    config.params.validate()?;
    config.charset.validate()?;
    let sk = generate_sk(&config.charset, config.key_len, rng)?;
    encrypt_with_key(data, sp, &sk, config, rng)
}

/// As [`encrypt_flow`] with a caller-chosen strong key.
pub fn encrypt_with_key<R: RngCore + CryptoRng>(
    data: &[u8],
    sp: &str,
    sk: &StrongKey,
    config: &EncryptConfig,
    rng: &mut R,
) -> Result<(VaultContainer, EncryptReport)> {
    if sp.is_empty() {
        return Err(Error::EmptyPassword);
    }
    let oracle = TemplateOracle::new(config.charset.clone(), config.params.n, sk.len())?;
    let attempts = config.attempts.max(1);
    for attempt in 1..=attempts {
        let thermal_seed = rng.next_u64();
        let deform_seed = rng.next_u64();
        let (fs, check) = imprint_and_check(config.params, sk, &oracle, thermal_seed, deform_seed)?;
        if let (Some(fs), true) = (fs, check.passed(sk.as_str())) {
            let container = seal_container(data, sp, sk, &fs, config.charset.id, config.kdf_work, rng)?;
            return Ok((
                container,
                EncryptReport {
                    attempts: attempt,
                    mask_fidelity: check.mask_fidelity.unwrap_or_default(),
                    decoded_score: check.score,
                },
            ));
        }
    }
    Err(Error::SelfCheckExhausted { attempts })
}

/// Back-integrates the state implied by `sp` and returns its sign field.
/// Any password yields a field; only a reader can tell whether it is right.
pub fn restore_candidate(container: &VaultContainer, sp: &str) -> Result<SignField> {
    let params = container.params()?;
    let keys = derive_keys(sp, None, &container.salt, container.kdf_work)?;
    let split = SplitState {
        n: params.n,
        f1: container.f1.clone(),
        f2: decrypt_f2(&container.ef2, &keys.k2, &container.nonce_f2),
    };
    let mut state = merge_state(&split, params).map_err(|e| Error::MalformedContainer(e.to_string()))?;
    state.time_reverse();
    state
        .integrate(params.tau_steps)
        .map_err(|e| Error::MalformedContainer(format!("state does not integrate: {e}")))?;
    Ok(state.sign_field())
}

/// Between the two decrypt phases: the candidate p-CAPTCHA plus what phase 2
/// needs. Consumed by [`decrypt_phase2`].
pub struct DecryptSession {
    pub field: SignField,
    container: VaultContainer,
    sp: Zeroizing<String>,
    expires_at: Instant,
}

impl std::fmt::Debug for DecryptSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DecryptSession")
            .field("n", &self.field.n)
            .field("expires_at", &self.expires_at)
            .finish_non_exhaustive()
    }
}

impl DecryptSession {
    pub fn image(&self, scale: usize) -> GrayImage {
        GrayImage::from_sign_field(&self.field, scale)
    }

    pub fn container(&self) -> &VaultContainer {
        &self.container
    }

    pub fn sk_len(&self) -> usize {
        self.container.sk_len as usize
    }

    pub fn expires_at(&self) -> Instant {
        self.expires_at
    }

    pub fn is_expired(&self, now: Instant) -> bool {
        now >= self.expires_at
    }

    /// Bytes of password still held; zero once wiped.
    pub fn retained_secret_len(&self) -> usize {
        self.sp.len()
    }

    pub fn wipe(&mut self) {
        self.sp.zeroize();
    }

    /// Tries a typed strong key without consuming the session, for front ends
    /// that allow a few typing mistakes. [`decrypt_phase2`] is the single-use
    /// form.
    pub fn try_sk_at(&self, sk_typed: &str, now: Instant) -> Result<Vec<u8>> {
        if self.is_expired(now) {
            return Err(Error::SessionExpired);
        }
        if self.sp.is_empty() {
            return Err(Error::SessionExpired);
        }
        decrypt_with_keys(&self.container, &self.sp, sk_typed)
    }
}

pub fn decrypt_phase1(container: VaultContainer, sp: &str) -> Result<DecryptSession> {
    decrypt_phase1_with_ttl(container, sp, DEFAULT_SESSION_TTL)
}

pub fn decrypt_phase1_with_ttl(container: VaultContainer, sp: &str, ttl: Duration) -> Result<DecryptSession> {
    let field = restore_candidate(&container, sp)?;
    Ok(DecryptSession {
        field,
        container,
        sp: Zeroizing::new(sp.to_owned()),
        expires_at: Instant::now() + ttl,
    })
}

pub fn decrypt_phase2(session: DecryptSession, sk_typed: &str) -> Result<Vec<u8>> {
    decrypt_phase2_at(session, sk_typed, Instant::now())
}

pub fn decrypt_phase2_at(mut session: DecryptSession, sk_typed: &str, now: Instant) -> Result<Vec<u8>> {
    let outcome = session.try_sk_at(sk_typed, now);
    session.wipe();
    outcome
}

/// One-shot decryption for callers that already know both secrets.
pub fn decrypt_with_keys(container: &VaultContainer, sp: &str, sk: &str) -> Result<Vec<u8>> {
    let keys = derive_keys(sp, Some(sk), &container.salt, container.kdf_work)?;
    let ek = keys.ek.as_ref().expect("EK derived with sk present");
    open_data(&container.ed, ek, &container.nonce_d, &container.aad())
}
