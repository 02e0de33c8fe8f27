//! Consensus messages and the two modelling messages used for chain sync.
//!
//! Each consensus message has a signed portion ([`SignedPayload`]) and, for
//! Proposal and Round-Change, an unsigned piggyback. The signature covers the
//! canonical encoding of every signed field; the piggyback is outside it.

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::chain::{compute_block_hash, FinalisedBlock, Height, ProposedBlock, Round};
use crate::crypto::codec::{Decode, DecodeError, Encode, Reader, Writer};
use crate::crypto::{digest_of, recover_address, Address, CryptoError, Digest, Keypair, Signature};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    #[error("round 0 proposals cannot carry a round-change certificate")]
    CertificateAtRoundZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Proposal,
    Prepare,
    Commit,
    RoundChange,
}

/// Kind-specific signed fields.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Body {
    Proposal { digest: Digest },
    Prepare { digest: Digest },
    Commit { digest: Digest, seal: Signature },
    RoundChange { prepared_certificate: Option<PreparedCertificate> },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignedPayload {
    pub height: Height,
    pub round: Round,
    pub body: Body,
    pub signature: Signature,
}

/// One Proposal plus the Prepares that made a validator prepared. Treated as a set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct PreparedCertificate {
    pub messages: Vec<SignedPayload>,
}

/// Signed portions of the Round-Change messages justifying a Proposal for round > 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct RoundChangeCertificate {
    pub messages: Vec<SignedPayload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProposalMessage {
    pub signed: SignedPayload,
    pub proposed_block: ProposedBlock,
    pub round_change_certificate: Option<RoundChangeCertificate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RoundChangeMessage {
    pub signed: SignedPayload,
    pub prepared_block: Option<ProposedBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ConsensusMessage {
    Proposal(ProposalMessage),
    Prepare(SignedPayload),
    Commit(SignedPayload),
    RoundChange(RoundChangeMessage),
}

/// Request for finalised blocks `lo ..= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GetBlocks {
    pub lo: Height,
    pub hi: Height,
}

impl GetBlocks {
    pub fn new(lo: Height, hi: Height) -> Option<Self> {
        (lo <= hi).then_some(GetBlocks { lo, hi })
    }
}

/// Everything that travels over the simulated network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NetMessage {
    Consensus(ConsensusMessage),
    FinalisedBlock(FinalisedBlock),
    GetBlocks(GetBlocks),
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::Proposal { .. } => MessageKind::Proposal,
            Body::Prepare { .. } => MessageKind::Prepare,
            Body::Commit { .. } => MessageKind::Commit,
            Body::RoundChange { .. } => MessageKind::RoundChange,
        }
    }
}

impl SignedPayload {
    pub fn new(height: Height, round: Round, body: Body, signer: &Keypair) -> Self {
        let digest = unsigned_digest(height, round, &body);
        SignedPayload {
            height,
            round,
            body,
            signature: signer.sign(&digest),
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    /// Block digest carried by Proposal, Prepare and Commit.
    pub fn digest(&self) -> Option<Digest> {
        match &self.body {
            Body::Proposal { digest } | Body::Prepare { digest } | Body::Commit { digest, .. } => {
                Some(*digest)
            }
            Body::RoundChange { .. } => None,
        }
    }

    pub fn prepared_certificate(&self) -> Option<&PreparedCertificate> {
        match &self.body {
            Body::RoundChange {
                prepared_certificate,
            } => prepared_certificate.as_ref(),
            _ => None,
        }
    }

    pub fn commit_seal(&self) -> Option<&Signature> {
        match &self.body {
            Body::Commit { seal, .. } => Some(seal),
            _ => None,
        }
    }

    /// Recovers the signer from the signature over the signed fields.
    pub fn sender(&self) -> Result<Address, CryptoError> {
        recover_address(&unsigned_digest(self.height, self.round, &self.body), &self.signature)
    }
}

fn unsigned_digest(height: Height, round: Round, body: &Body) -> Digest {
    let mut w = Writer::default();
    encode_unsigned(&mut w, height, round, body);
    crate::crypto::hash_digest(&w.into_bytes())
}

fn encode_unsigned(w: &mut Writer, height: Height, round: Round, body: &Body) {
    w.u8(kind_tag(body.kind()));
    w.u64(height);
    w.u64(round);
    match body {
        Body::Proposal { digest } | Body::Prepare { digest } => digest.encode_to(w),
        Body::Commit { digest, seal } => {
            digest.encode_to(w);
            seal.encode_to(w);
        }
        Body::RoundChange {
            prepared_certificate,
        } => w.option(prepared_certificate.as_ref()),
    }
}

fn kind_tag(kind: MessageKind) -> u8 {
    match kind {
        MessageKind::Proposal => 0,
        MessageKind::Prepare => 1,
        MessageKind::Commit => 2,
        MessageKind::RoundChange => 3,
    }
}

pub fn make_proposal(
    height: Height,
    round: Round,
    proposed_block: ProposedBlock,
    rcc: Option<RoundChangeCertificate>,
    signer: &Keypair,
) -> Result<ProposalMessage, MessageError> {
    if round == 0 && rcc.is_some() {
        return Err(MessageError::CertificateAtRoundZero);
    }
    let digest = compute_block_hash(&proposed_block);
    Ok(ProposalMessage {
        signed: SignedPayload::new(height, round, Body::Proposal { digest }, signer),
        proposed_block,
        round_change_certificate: rcc,
    })
}

pub fn make_prepare(height: Height, round: Round, digest: Digest, signer: &Keypair) -> SignedPayload {
    SignedPayload::new(height, round, Body::Prepare { digest }, signer)
}

pub fn make_commit(
    height: Height,
    round: Round,
    digest: Digest,
    seal: Signature,
    signer: &Keypair,
) -> SignedPayload {
    SignedPayload::new(height, round, Body::Commit { digest, seal }, signer)
}

pub fn make_round_change(
    height: Height,
    round: Round,
    latest_pc: Option<PreparedCertificate>,
    latest_prepared_block: Option<ProposedBlock>,
    signer: &Keypair,
) -> RoundChangeMessage {
    RoundChangeMessage {
        signed: SignedPayload::new(
            height,
            round,
            Body::RoundChange {
                prepared_certificate: latest_pc,
            },
            signer,
        ),
        prepared_block: latest_prepared_block,
    }
}

pub fn sender_of(payload: &SignedPayload) -> Result<Address, CryptoError> {
    payload.sender()
}

impl ConsensusMessage {
    pub fn signed(&self) -> &SignedPayload {
        match self {
            ConsensusMessage::Proposal(p) => &p.signed,
            ConsensusMessage::Prepare(s) | ConsensusMessage::Commit(s) => s,
            ConsensusMessage::RoundChange(rc) => &rc.signed,
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self {
            ConsensusMessage::Proposal(_) => MessageKind::Proposal,
            ConsensusMessage::Prepare(_) => MessageKind::Prepare,
            ConsensusMessage::Commit(_) => MessageKind::Commit,
            ConsensusMessage::RoundChange(_) => MessageKind::RoundChange,
        }
    }

    pub fn height(&self) -> Height {
        self.signed().height
    }

    pub fn round(&self) -> Round {
        self.signed().round
    }

    pub fn sender(&self) -> Result<Address, CryptoError> {
        self.signed().sender()
    }

    /// Human-readable rendering used in traces.
    pub fn summary(&self) -> Value {
        let s = self.signed();
        let mut v = json!({
            "kind": self.kind(),
            "height": s.height,
            "round": s.round,
            "digest": s.digest(),
            "sender": s.sender().ok(),
        });
        let extra = match self {
            ConsensusMessage::Proposal(p) => json!({
                "block": p.proposed_block.block.hash(),
                "block_round": p.proposed_block.round,
                "rcc_size": p.round_change_certificate.as_ref().map(|c| c.messages.len()),
            }),
            ConsensusMessage::Prepare(_) => Value::Null,
            ConsensusMessage::Commit(_) => json!({"seal_ok": s.digest().and_then(|d| s.commit_seal().map(|seal| recover_address(&d, seal).ok() == s.sender().ok()))}),
            ConsensusMessage::RoundChange(rc) => json!({
                "pc_size": s.prepared_certificate().map(|pc| pc.messages.len()),
                "prepared_block": rc.prepared_block.as_ref().map(compute_block_hash),
            }),
        };
        if !extra.is_null() {
            v["extra"] = extra;
        }
        v
    }
}

impl NetMessage {
    pub fn summary(&self) -> Value {
        match self {
            NetMessage::Consensus(m) => m.summary(),
            NetMessage::FinalisedBlock(fb) => json!({
                "kind": "FINALISED_BLOCK",
                "height": fb.height(),
                "round": fb.proof.round,
                "digest": fb.block.hash(),
                "extra": {"seals": fb.proof.commit_seals.len()},
            }),
            NetMessage::GetBlocks(g) => json!({
                "kind": "GET_BLOCKS",
                "extra": {"lo": g.lo, "hi": g.hi},
            }),
        }
    }

    /// Hash of the full canonical encoding; the dedup key of a message.
    pub fn id(&self) -> Digest {
        digest_of(self)
    }
}

impl Encode for SignedPayload {
    fn encode_to(&self, w: &mut Writer) {
        encode_unsigned(w, self.height, self.round, &self.body);
        self.signature.encode_to(w);
    }
}

impl Decode for SignedPayload {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tag = r.u8()?;
        let height = r.u64()?;
        let round = r.u64()?;
        let body = match tag {
            0 => Body::Proposal {
                digest: Digest::decode_from(r)?,
            },
            1 => Body::Prepare {
                digest: Digest::decode_from(r)?,
            },
            2 => Body::Commit {
                digest: Digest::decode_from(r)?,
                seal: Signature::decode_from(r)?,
            },
            3 => Body::RoundChange {
                prepared_certificate: r.option()?,
            },
            tag => {
                return Err(DecodeError::UnknownTag {
                    what: "message kind",
                    tag,
                })
            }
        };
        Ok(SignedPayload {
            height,
            round,
            body,
            signature: Signature::decode_from(r)?,
        })
    }
}

impl Encode for PreparedCertificate {
    fn encode_to(&self, w: &mut Writer) {
        w.seq(self.messages.iter());
    }
}

impl Decode for PreparedCertificate {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(PreparedCertificate { messages: r.seq()? })
    }
}

impl Encode for RoundChangeCertificate {
    fn encode_to(&self, w: &mut Writer) {
        w.seq(self.messages.iter());
    }
}

impl Decode for RoundChangeCertificate {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(RoundChangeCertificate { messages: r.seq()? })
    }
}

fn expect_kind(p: &SignedPayload, kind: MessageKind) -> Result<(), DecodeError> {
    if p.kind() == kind {
        Ok(())
    } else {
        Err(DecodeError::Invalid("signed payload kind does not match message"))
    }
}

impl Encode for ConsensusMessage {
    fn encode_to(&self, w: &mut Writer) {
        match self {
            ConsensusMessage::Proposal(p) => {
                w.u8(0);
                p.signed.encode_to(w);
                p.proposed_block.encode_to(w);
                w.option(p.round_change_certificate.as_ref());
            }
            ConsensusMessage::Prepare(s) => {
                w.u8(1);
                s.encode_to(w);
            }
            ConsensusMessage::Commit(s) => {
                w.u8(2);
                s.encode_to(w);
            }
            ConsensusMessage::RoundChange(rc) => {
                w.u8(3);
                rc.signed.encode_to(w);
                w.option(rc.prepared_block.as_ref());
            }
        }
    }
}

impl Decode for ConsensusMessage {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let tag = r.u8()?;
        let signed = SignedPayload::decode_from(r)?;
        Ok(match tag {
            0 => {
                expect_kind(&signed, MessageKind::Proposal)?;
                ConsensusMessage::Proposal(ProposalMessage {
                    signed,
                    proposed_block: ProposedBlock::decode_from(r)?,
                    round_change_certificate: r.option()?,
                })
            }
            1 => {
                expect_kind(&signed, MessageKind::Prepare)?;
                ConsensusMessage::Prepare(signed)
            }
            2 => {
                expect_kind(&signed, MessageKind::Commit)?;
                ConsensusMessage::Commit(signed)
            }
            3 => {
                expect_kind(&signed, MessageKind::RoundChange)?;
                ConsensusMessage::RoundChange(RoundChangeMessage {
                    signed,
                    prepared_block: r.option()?,
                })
            }
            tag => {
                return Err(DecodeError::UnknownTag {
                    what: "consensus message",
                    tag,
                })
            }
        })
    }
}

impl Encode for NetMessage {
    fn encode_to(&self, w: &mut Writer) {
        match self {
            NetMessage::Consensus(m) => {
                w.u8(0);
                m.encode_to(w);
            }
            NetMessage::FinalisedBlock(fb) => {
                w.u8(1);
                fb.encode_to(w);
            }
            NetMessage::GetBlocks(g) => {
                w.u8(2);
                w.u64(g.lo);
                w.u64(g.hi);
            }
        }
    }
}

impl Decode for NetMessage {
    fn decode_from(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(NetMessage::Consensus(ConsensusMessage::decode_from(r)?)),
            1 => Ok(NetMessage::FinalisedBlock(FinalisedBlock::decode_from(r)?)),
            2 => {
                let (lo, hi) = (r.u64()?, r.u64()?);
                GetBlocks::new(lo, hi)
                    .map(NetMessage::GetBlocks)
                    .ok_or(DecodeError::Invalid("GET-BLOCKS with lo > hi"))
            }
            tag => Err(DecodeError::UnknownTag {
                what: "network message",
                tag,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::test_support::{keys, set_of};
    use crate::chain::{create_new_proposed_block, Chain, TxPool};
    use crate::crypto::{key_gen, Keypair};
    use proptest::prelude::*;

    fn block_for(chain: &Chain, k: &Keypair) -> ProposedBlock {
        ProposedBlock::new(
            create_new_proposed_block(chain.next_height(), k.address, chain, &TxPool::new(0), &[]),
            0,
        )
    }

    #[test]
    fn proposal_binds_block_and_sender() {
        let k = keys(4);
        let chain = Chain::new(set_of(&k));
        let pb = block_for(&chain, &k[0]);
        let p = make_proposal(1, 0, pb.clone(), None, &k[0]).unwrap();
        assert_eq!(p.signed.sender().unwrap(), k[0].address);
        assert_eq!(p.signed.digest(), Some(compute_block_hash(&pb)));
        assert_eq!(
            make_proposal(1, 0, pb, Some(RoundChangeCertificate::default()), &k[0]),
            Err(MessageError::CertificateAtRoundZero)
        );
    }

    #[test]
    fn round_two_proposal_binds_block_round() {
        let k = keys(4);
        let chain = Chain::new(set_of(&k));
        let eb = block_for(&chain, &k[1]).block;
        let rcc = RoundChangeCertificate {
            messages: k[..3]
                .iter()
                .map(|kp| make_round_change(3, 2, None, None, kp).signed)
                .collect(),
        };
        let pb = ProposedBlock::new(eb.clone(), 2);
        let p = make_proposal(3, 2, pb, Some(rcc), &k[1]).unwrap();
        assert_eq!(
            p.signed.digest(),
            Some(compute_block_hash(&ProposedBlock::new(eb, 2)))
        );
        assert_eq!(p.round_change_certificate.unwrap().messages.len(), 3);
    }

    #[test]
    fn prepare_and_commit() {
        let k = keys(3);
        let h = crate::crypto::hash_digest(b"block");
        let h2 = crate::crypto::hash_digest(b"other");
        let p = make_prepare(1, 0, h, &k[0]);
        assert_eq!(sender_of(&p).unwrap(), k[0].address);
        assert_ne!(p.signature, make_prepare(1, 0, h2, &k[0]).signature);

        let c = make_commit(1, 0, h, k[2].sign(&h), &k[2]);
        assert_eq!(recover_address(&h, c.commit_seal().unwrap()).unwrap(), c.sender().unwrap());
        // Mismatched seal is representable; validation rejects it later.
        let bad = make_commit(1, 0, h, k[1].sign(&h), &k[2]);
        assert_ne!(recover_address(&h, bad.commit_seal().unwrap()).unwrap(), bad.sender().unwrap());
    }

    #[test]
    fn fresh_round_change_is_empty() {
        let k = key_gen(1);
        let rc = make_round_change(4, 1, None, None, &k);
        assert!(rc.signed.prepared_certificate().is_none());
        assert!(rc.prepared_block.is_none());
        assert_eq!(rc.signed.sender().unwrap(), k.address);
    }

    #[test]
    fn unsigned_portion_does_not_affect_sender() {
        let k = keys(4);
        let chain = Chain::new(set_of(&k));
        let mut p = make_proposal(1, 0, block_for(&chain, &k[0]), None, &k[0]).unwrap();
        p.proposed_block.round = 9;
        p.round_change_certificate = Some(RoundChangeCertificate::default());
        assert_eq!(p.signed.sender().unwrap(), k[0].address);
    }

    #[test]
    fn get_blocks_requires_ordered_range() {
        assert!(GetBlocks::new(5, 4).is_none());
        assert!(GetBlocks::new(4, 4).is_some());
    }

    #[test]
    fn summary_has_core_fields() {
        let k = key_gen(1);
        let m = ConsensusMessage::Prepare(make_prepare(2, 1, Digest([3; 32]), &k));
        let s = m.summary();
        assert_eq!(s["kind"], "PREPARE");
        assert_eq!(s["height"], 2);
        assert_eq!(s["round"], 1);
        assert_eq!(s["sender"], serde_json::to_value(k.address).unwrap());
    }

    fn arb_message() -> impl Strategy<Value = ConsensusMessage> {
        let keys: Vec<Keypair> = keys(4);
        (0u8..4, 1u64..50, 0u64..20, any::<[u8; 32]>(), 0usize..4, any::<bool>()).prop_map(
            move |(kind, h, r, d, who, with_pc)| {
                let kp = &keys[who];
                let digest = Digest(d);
                match kind {
                    0 => {
                        let chain = Chain::new(set_of(&keys));
                        let pb = block_for(&chain, kp);
                        let rcc = (r > 0).then(|| RoundChangeCertificate {
                            messages: vec![make_round_change(h, r, None, None, kp).signed],
                        });
                        ConsensusMessage::Proposal(make_proposal(h, r, pb, rcc, kp).unwrap())
                    }
                    1 => ConsensusMessage::Prepare(make_prepare(h, r, digest, kp)),
                    2 => ConsensusMessage::Commit(make_commit(h, r, digest, kp.sign(&digest), kp)),
                    _ => {
                        let pc = with_pc.then(|| PreparedCertificate {
                            messages: vec![
                                SignedPayload::new(h, 0, Body::Proposal { digest }, kp),
                                make_prepare(h, 0, digest, &keys[(who + 1) % 4]),
                            ],
                        });
                        ConsensusMessage::RoundChange(make_round_change(h, r, pc, None, kp))
                    }
                }
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn encoding_round_trips(m in arb_message()) {
            let bytes = NetMessage::Consensus(m.clone()).encode();
            let back = NetMessage::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &NetMessage::Consensus(m));
            prop_assert_eq!(back.encode(), bytes);
        }

        #[test]
        fn flipping_a_signed_bit_changes_sender(m in arb_message(), pos in any::<proptest::sample::Index>(), bit in 0u8..8) {
            let original = m.sender().unwrap();
            let mut bytes = m.signed().encode();
            // Only flip bits in the signed fields, not the signature itself.
            let sig_len = 4 + m.signed().signature.0.len();
            let limit = bytes.len() - sig_len;
            let i = pos.index(limit);
            bytes[i] ^= 1 << bit;
            match SignedPayload::decode(&bytes) {
                Err(_) => {}
                Ok(p) => prop_assert_ne!(p.sender().ok(), Some(original)),
            }
        }
    }
}
