//! Key-exchange entropy without read(): clock jitter, walker races, and file
//! digests. Two walkers sweep /var and /tmp, timestamping each file and
//! hashing its content via mmap; every observation is stirred into a
//! 1960-bit pool. Nothing here claims cryptographic strength; the goal is
//! to deny the network observer the seed material.

use sha1::{Digest, Sha1};

use super::value::Value;
use crate::simkernel::Host;

/// Pool size: 1960 bits.
pub const POOL_BYTES: usize = 245;
const DIGEST_WINDOW: usize = 1_048_576;

#[derive(Clone)]
pub struct EntropyPool {
    bytes: [u8; POOL_BYTES],
    pub stir_counter: u64,
}

impl Default for EntropyPool {
    fn default() -> Self {
        Self::new()
    }
}

impl EntropyPool {
    pub fn new() -> Self {
        EntropyPool { bytes: [0u8; POOL_BYTES], stir_counter: 0 }
    }

    /// Stir one serialized item: SHA-1 over item || 8-byte big-endian stir
    /// counter, XORed in at byte offset (counter * 20 mod 245), wrapping.
    /// The pool never changes size.
    pub fn stir(&mut self, item: &[u8]) {
        let mut h = Sha1::new();
        h.update(item);
        h.update(self.stir_counter.to_be_bytes());
        let digest = h.finalize();
        let base = (self.stir_counter as usize * 20) % POOL_BYTES;
        for (i, b) in digest.iter().enumerate() {
            self.bytes[(base + i) % POOL_BYTES] ^= b;
        }
        self.stir_counter += 1;
    }

    pub fn as_bytes(&self) -> &[u8; POOL_BYTES] {
        &self.bytes
    }

    pub fn is_all_zero(&self) -> bool {
        self.bytes.iter().all(|&b| b == 0)
    }

    /// 32-byte condensation used to seed the key-exchange generator.
    pub fn seed32(&self) -> [u8; 32] {
        let mut h = sha2::Sha256::new();
        sha2::Digest::update(&mut h, self.bytes);
        sha2::Digest::finalize(h).into()
    }
}

#[derive(Debug, Clone)]
pub struct EntropyItem {
    pub walker: u32,
    pub path: String,
    pub start_ns: u64,
    pub stop_ns: u64,
    pub digest: Option<[u8; 20]>,
}

fn digest_value(d: &Option<[u8; 20]>) -> Value {
    match d {
        Some(bytes) => Value::Bytes(bytes.to_vec()),
        None => Value::Null,
    }
}

fn stir_item(pool: &mut EntropyPool, item: &EntropyItem, position: usize, fresh_ts: u64) {
    let v = Value::List(vec![
        Value::Int(item.start_ns as i64),
        Value::Int(item.walker as i64),
        digest_value(&item.digest),
        Value::Int(item.stop_ns as i64),
        Value::Int(position as i64),
        Value::Int(fresh_ts as i64),
    ]);
    pool.stir(&v.encode());
}

fn walk_targets(host: &Host) -> Vec<String> {
    let mut out: Vec<String> = host
        .fs
        .paths()
        .filter(|p| p.starts_with("/var/") || p.starts_with("/tmp/"))
        .cloned()
        .collect();
    out.sort();
    out
}

/// Digest per the gatherer's rule: whole file if readable and under one
/// megabyte, otherwise exactly the final megabyte. Unreadable files yield
/// no digest (their timestamps still count).
pub fn digest_for(host: &mut Host, path: &str) -> Option<[u8; 20]> {
    let content = host.mmap_read(0, path).ok()?;
    let slice = if content.len() < DIGEST_WINDOW {
        &content[..]
    } else {
        &content[content.len() - DIGEST_WINDOW..]
    };
    let mut h = Sha1::new();
    h.update(slice);
    Some(h.finalize().into())
}

/// Process one file. `work_ns` models how long the digest actually took
/// under the prevailing scheduling; it lands between the two timestamps.
fn process_one(host: &mut Host, walker: u32, path: &str, work_ns: u64) -> EntropyItem {
    let start_ns = host.clock.hi_res();
    let digest = digest_for(host, path);
    host.clock.advance_ns(work_ns);
    let stop_ns = host.clock.hi_res();
    EntropyItem { walker, path: path.to_string(), start_ns, stop_ns, digest }
}

fn finish(host: &mut Host, items: Vec<EntropyItem>) -> (EntropyPool, Vec<EntropyItem>) {
    let mut items = items;
    // Closing timestamp item: even an empty tree stirs the pool at least once.
    let t0 = host.clock.hi_res();
    let t1 = host.clock.hi_res();
    items.push(EntropyItem { walker: 0, path: String::new(), start_ns: t0, stop_ns: t1, digest: None });
    let mut pool = EntropyPool::new();
    for (pos, item) in items.iter().enumerate() {
        let fresh = host.clock.hi_res();
        stir_item(&mut pool, item, pos, fresh);
    }
    (pool, items)
}

/// Simulation-mode gatherer: both walkers sweep the same file list, their
/// interleaving and per-step work durations driven by a seeded scheduler.
/// Which walker reaches a file first differs per seed, and so does every
/// timestamp.
pub fn gather_entropy(host: &mut Host, scheduler_seed: u64) -> (EntropyPool, Vec<EntropyItem>) {
    use rand::{Rng, SeedableRng};
    let files = walk_targets(host);
    let mut sched = rand_chacha::ChaCha12Rng::seed_from_u64(scheduler_seed ^ 0xe47_2097);
    let mut cursors = [0usize, 0usize];
    let mut items = Vec::new();
    while cursors.iter().any(|&c| c < files.len()) {
        let pick = if cursors[0] >= files.len() {
            1
        } else if cursors[1] >= files.len() {
            0
        } else {
            sched.gen_range(0..2usize)
        };
        let path = files[cursors[pick]].clone();
        cursors[pick] += 1;
        let work_ns = sched.gen_range(800..60_000u64);
        items.push(process_one(host, pick as u32, &path, work_ns));
    }
    finish(host, items)
}

/// Live-mode gatherer: two OS threads race over the same list, serialized
/// per file by a mutex. The interleaving comes from real scheduling.
pub fn gather_entropy_live(host: &mut Host) -> (EntropyPool, Vec<EntropyItem>) {
    use std::sync::Mutex;
    let files = walk_targets(host);
    let shared = Mutex::new((host, Vec::<EntropyItem>::new(), [0usize, 0usize]));
    std::thread::scope(|scope| {
        for walker in 0..2u32 {
            let shared = &shared;
            let files = &files;
            scope.spawn(move || loop {
                let started = std::time::Instant::now();
                let mut guard = shared.lock().unwrap();
                let (host, items, cursors) = &mut *guard;
                let cursor = &mut cursors[walker as usize];
                if *cursor >= files.len() {
                    return;
                }
                let path = files[*cursor].clone();
                *cursor += 1;
                let work_ns = (started.elapsed().as_nanos() as u64).max(1);
                let item = process_one(host, walker, &path, work_ns);
                items.push(item);
                drop(guard);
                std::thread::yield_now();
            });
        }
    });
    let (host, items, _) = shared.into_inner().unwrap();
    finish(host, items)
}
