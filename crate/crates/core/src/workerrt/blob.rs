//! Process-image blob format.
//!
//! ```text
//! +---------+------------------------------------------+---------+
//! | version | field*  (u32 LE length, then the bytes)  | crc32   |
//! +---------+------------------------------------------+---------+
//! ```
//!
//! Fields, in order: vm_index (u32), process_count (u32), iteration (u64),
//! phase (u8), accumulator (u64), rng_state (u64), sent (u64), consumed (u64),
//! inbox, padding. All integers are little-endian. The inbox field is a u32
//! message count followed by `from u32, iteration u64, value u64,
//! payload_len u32, payload` per message. The trailing CRC-32 (IEEE) covers
//! every preceding byte including the version byte.

use serde::{Deserialize, Serialize};

use super::RtError;

pub const BLOB_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Send,
    Recv,
    Done,
}

impl Phase {
    fn to_byte(self) -> u8 {
        match self {
            Phase::Send => 0,
            Phase::Recv => 1,
            Phase::Done => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Phase> {
        match b {
            0 => Some(Phase::Send),
            1 => Some(Phase::Recv),
            2 => Some(Phase::Done),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Message {
    pub from: u32,
    pub iteration: u64,
    pub value: u64,
    pub payload: Vec<u8>,
}

/// Everything one daemon needs to resume. Position independent: nothing in
/// here refers to the VM or backend that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProcessState {
    pub vm_index: u32,
    pub process_count: u32,
    pub iteration: u64,
    pub phase: Phase,
    pub accumulator: u64,
    /// Undelivered messages, oldest first.
    pub inbox: Vec<Message>,
    pub rng_state: u64,
    pub sent: u64,
    pub consumed: u64,
    pub padding: Vec<u8>,
}

fn put_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

impl ProcessState {
    pub fn encode(&self) -> Vec<u8> {
        let inbox_len: usize = self.inbox.iter().map(|m| 24 + m.payload.len()).sum();
        let mut out = Vec::with_capacity(1 + 10 * 4 + 45 + 4 + inbox_len + self.padding.len() + 4);
        out.push(BLOB_VERSION);
        put_field(&mut out, &self.vm_index.to_le_bytes());
        put_field(&mut out, &self.process_count.to_le_bytes());
        put_field(&mut out, &self.iteration.to_le_bytes());
        put_field(&mut out, &[self.phase.to_byte()]);
        put_field(&mut out, &self.accumulator.to_le_bytes());
        put_field(&mut out, &self.rng_state.to_le_bytes());
        put_field(&mut out, &self.sent.to_le_bytes());
        put_field(&mut out, &self.consumed.to_le_bytes());

        let mut inbox = Vec::with_capacity(4 + inbox_len);
        inbox.extend_from_slice(&(self.inbox.len() as u32).to_le_bytes());
        for m in &self.inbox {
            inbox.extend_from_slice(&m.from.to_le_bytes());
            inbox.extend_from_slice(&m.iteration.to_le_bytes());
            inbox.extend_from_slice(&m.value.to_le_bytes());
            inbox.extend_from_slice(&(m.payload.len() as u32).to_le_bytes());
            inbox.extend_from_slice(&m.payload);
        }
        put_field(&mut out, &inbox);
        put_field(&mut out, &self.padding);

        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(blob: &[u8]) -> Result<ProcessState, RtError> {
        let corrupt = |why: &str| RtError::CorruptImage(why.to_string());
        if blob.len() < 5 {
            return Err(corrupt("truncated"));
        }
        let (body, crc_bytes) = blob.split_at(blob.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        if body[0] != BLOB_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let mut r = Reader { buf: &body[1..] };
        let vm_index = u32::from_le_bytes(r.fixed::<4>()?);
        let process_count = u32::from_le_bytes(r.fixed::<4>()?);
        let iteration = u64::from_le_bytes(r.fixed::<8>()?);
        let phase = Phase::from_byte(r.fixed::<1>()?[0]).ok_or_else(|| corrupt("bad phase"))?;
        let accumulator = u64::from_le_bytes(r.fixed::<8>()?);
        let rng_state = u64::from_le_bytes(r.fixed::<8>()?);
        let sent = u64::from_le_bytes(r.fixed::<8>()?);
        let consumed = u64::from_le_bytes(r.fixed::<8>()?);

        let mut ib = Reader { buf: r.field()? };
        let count = u32::from_le_bytes(ib.take::<4>()?);
        let mut inbox = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let from = u32::from_le_bytes(ib.take::<4>()?);
            let iteration = u64::from_le_bytes(ib.take::<8>()?);
            let value = u64::from_le_bytes(ib.take::<8>()?);
            let len = u32::from_le_bytes(ib.take::<4>()?) as usize;
            let payload = ib.bytes(len)?.to_vec();
            inbox.push(Message { from, iteration, value, payload });
        }
        if !ib.buf.is_empty() {
            return Err(corrupt("trailing inbox bytes"));
        }
        let padding = r.field()?.to_vec();
        if !r.buf.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(ProcessState {
            vm_index,
            process_count,
            iteration,
            phase,
            accumulator,
            inbox,
            rng_state,
            sent,
            consumed,
            padding,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], RtError> {
        if self.buf.len() < n {
            return Err(RtError::CorruptImage("truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], RtError> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    fn field(&mut self) -> Result<&'a [u8], RtError> {
        let len = u32::from_le_bytes(self.take::<4>()?) as usize;
        self.bytes(len)
    }

    fn fixed<const N: usize>(&mut self) -> Result<[u8; N], RtError> {
        let f = self.field()?;
        f.try_into().map_err(|_| RtError::CorruptImage(format!("field length {} != {N}", f.len())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ProcessState {
        ProcessState {
            vm_index: 2,
            process_count: 4,
            iteration: 5,
            phase: Phase::Recv,
            accumulator: 0xdead_beef,
            inbox: vec![Message { from: 1, iteration: 5, value: 77, payload: vec![1, 2, 3] }],
            rng_state: 42,
            sent: 6,
            consumed: 5,
            padding: vec![9; 16],
        }
    }

    #[test]
    fn known_layout() {
        let b = sample().encode();
        assert_eq!(b[0], BLOB_VERSION);
        // first field: length 4, then vm_index = 2
        assert_eq!(&b[1..9], &[4, 0, 0, 0, 2, 0, 0, 0]);
        let crc = u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&b[..b.len() - 4]));
    }

    #[test]
    fn bit_flip_is_detected() {
        let mut b = sample().encode();
        b[20] ^= 0x10;
        assert!(matches!(ProcessState::decode(&b), Err(RtError::CorruptImage(_))));
    }

    #[test]
    fn truncation_is_detected() {
        let b = sample().encode();
        assert!(ProcessState::decode(&b[..b.len() - 1]).is_err());
        assert!(ProcessState::decode(&[]).is_err());
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        (any::<u32>(), any::<u64>(), any::<u64>(), prop::collection::vec(any::<u8>(), 0..32))
            .prop_map(|(from, iteration, value, payload)| Message { from, iteration, value, payload })
    }

    prop_compose! {
        fn arb_state()(
            vm_index in any::<u32>(),
            process_count in any::<u32>(),
            iteration in any::<u64>(),
            phase in prop_oneof![Just(Phase::Send), Just(Phase::Recv), Just(Phase::Done)],
            accumulator in any::<u64>(),
            inbox in prop::collection::vec(arb_message(), 0..6),
            rng_state in any::<u64>(),
            sent in any::<u64>(),
            consumed in any::<u64>(),
            padding in prop::collection::vec(any::<u8>(), 0..256),
        ) -> ProcessState {
            ProcessState { vm_index, process_count, iteration, phase, accumulator, inbox, rng_state, sent, consumed, padding }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn roundtrip_identity(s in arb_state()) {
            let blob = s.encode();
            prop_assert_eq!(ProcessState::decode(&blob).unwrap(), s);
        }
    }
}
