use capsule_core::coap::{code, decode, encode, CoapMessage, MessageType};
use coap_lite::{CoapOption, MessageClass, MessageType as LiteType, Packet};
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROUND_TRIPS: usize = 100_000;

fn random_message(rng: &mut ChaCha8Rng) -> CoapMessage {
    let mut below = |n: u32| rng.next_u32() % n;
    let mtype = [MessageType::Con, MessageType::Non, MessageType::Ack, MessageType::Rst][below(4) as usize];
    let code = below(256) as u8;
    let mid = below(65536) as u16;
    let token: Vec<u8> = (0..below(9)).map(|_| below(256) as u8).collect();
    let mut numbers: Vec<u16> = (0..below(8)).map(|_| below(1500) as u16).collect();
    numbers.sort_unstable();
    let mut m = CoapMessage::new(mtype, code, mid).with_token(&token);
    for n in numbers {
        // Mostly short values, sometimes long enough for the extended length forms.
        let len = if below(8) == 0 { below(300) } else { below(16) };
        m.add_option(n, (0..len).map(|_| below(256) as u8).collect::<Vec<u8>>());
    }
    let payload: Vec<u8> = (0..below(200)).map(|_| below(256) as u8).collect();
    m.with_payload(payload)
}

fn to_lite(m: &CoapMessage) -> Packet {
    let mut p = Packet::new();
    p.header.set_type(match m.mtype {
        MessageType::Con => LiteType::Confirmable,
        MessageType::Non => LiteType::NonConfirmable,
        MessageType::Ack => LiteType::Acknowledgement,
        MessageType::Rst => LiteType::Reset,
    });
    p.header.code = MessageClass::from(m.code);
    p.header.message_id = m.message_id;
    p.set_token(m.token.clone());
    for o in &m.options {
        p.add_option(CoapOption::from(o.number), o.value.clone());
    }
    p.payload = m.payload.clone();
    p
}

fn golden() -> usize {
    let get = CoapMessage::new(MessageType::Con, code::GET, 1);
    let ack = CoapMessage::new(MessageType::Ack, code::EMPTY, 7);
    let temp = CoapMessage::request(MessageType::Con, code::GET, 0x1234, "/vm1/sensor1/temp");
    let mut ext = CoapMessage::new(MessageType::Non, code::CONTENT, 9).with_token(&[1, 2]).with_payload(*b"hi");
    ext.add_option(12, vec![0x28]);
    ext.add_option(60, vec![0u8; 20]);
    ext.add_option(2000, vec![7u8; 300]);
    let vectors = [
        (&get, "40010001".to_string()),
        (&ack, "60000007".to_string()),
        (&temp, "40011234b3766d310773656e736f72310474656d70".to_string()),
        (&ext, hex::encode(to_lite(&ext).to_bytes_unlimited().unwrap())),
    ];
    for (m, want) in &vectors {
        let ours = encode(m).unwrap();
        assert_eq!(hex::encode(&ours), *want);
        assert_eq!(ours, to_lite(m).to_bytes_unlimited().unwrap(), "reference codec bytes");
        assert_eq!(&decode(&ours).unwrap(), *m);
    }
    vectors.len()
}

pub fn check() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0A9);
    let mut compared = 0;
    for i in 0..ROUND_TRIPS {
        let m = random_message(&mut rng);
        let bytes = encode(&m).unwrap();
        assert_eq!(decode(&bytes).unwrap(), m, "message {i}");
        // The reference drops token, options and payload of 0.00 messages.
        if m.code != code::EMPTY {
            assert_eq!(bytes, to_lite(&m).to_bytes_unlimited().unwrap(), "message {i} vs reference");
            compared += 1;
        }
    }
    let n = golden();
    format!("{ROUND_TRIPS} random round trips, {compared} byte-identical to coap-lite, {n} golden vectors")
}
