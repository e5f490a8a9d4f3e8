//! Datagram transports: in-process loopback and UDP.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use crate::device::Device;

pub const MAX_DATAGRAM: usize = 65_535;

/// Send one datagram and wait for at most one reply.
pub trait Transport {
    /// `Ok(None)` means nothing arrived before `timeout`.
    fn exchange(&mut self, datagram: &[u8], timeout: Duration) -> io::Result<Option<Vec<u8>>>;
}

/// Calls straight into a device. Loss can be injected in either direction.
#[derive(Debug)]
pub struct Loopback<'a> {
    device: &'a mut Device,
    lose_requests: u32,
    lose_responses: u32,
    pub delivered: u64,
}

impl<'a> Loopback<'a> {
    pub fn new(device: &'a mut Device) -> Self {
        Self {
            device,
            lose_requests: 0,
            lose_responses: 0,
            delivered: 0,
        }
    }

    /// Drop the next `n` requests before they reach the device.
    pub fn lose_requests(&mut self, n: u32) {
        self.lose_requests = n;
    }

    /// Let the next `n` requests through but drop the device's replies.
    pub fn lose_responses(&mut self, n: u32) {
        self.lose_responses = n;
    }

    pub fn device(&mut self) -> &mut Device {
        self.device
    }
}

impl Transport for Loopback<'_> {
    fn exchange(&mut self, datagram: &[u8], _timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        if self.lose_requests > 0 {
            self.lose_requests -= 1;
            return Ok(None);
        }
        self.delivered += 1;
        let reply = self.device.handle_datagram(datagram);
        if self.lose_responses > 0 {
            self.lose_responses -= 1;
            return Ok(None);
        }
        Ok(reply)
    }
}

#[derive(Debug)]
pub struct UdpTransport {
    socket: UdpSocket,
    target: SocketAddr,
}

impl UdpTransport {
    pub fn connect(target: &str) -> io::Result<Self> {
        let target = target
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        let bind: SocketAddr = if target.is_ipv4() {
            "0.0.0.0:0".parse().expect("literal")
        } else {
            "[::]:0".parse().expect("literal")
        };
        Ok(Self {
            socket: UdpSocket::bind(bind)?,
            target,
        })
    }
}

impl Transport for UdpTransport {
    fn exchange(&mut self, datagram: &[u8], timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        self.socket.send_to(datagram, self.target)?;
        self.socket.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        let mut buf = vec![0u8; MAX_DATAGRAM];
        loop {
            match self.socket.recv_from(&mut buf) {
                Ok((n, from)) if from == self.target => return Ok(Some(buf[..n].to_vec())),
                Ok(_) => continue,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Ok(None)
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Run the device loop on `socket` until `stop` is set.
pub fn serve_udp(device: &mut Device, socket: &UdpSocket, stop: &AtomicBool) -> io::Result<()> {
    socket.set_read_timeout(Some(Duration::from_millis(100)))?;
    let mut buf = vec![0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::Relaxed) {
        let (n, from) = match socket.recv_from(&mut buf) {
            Ok(x) => x,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
            // ICMP errors from earlier sends surface here on some platforms.
            Err(e) if e.kind() == io::ErrorKind::ConnectionReset => continue,
            Err(e) => return Err(e),
        };
        if let Some(reply) = device.handle_datagram(&buf[..n]) {
            // A vanished client is not the device's problem.
            let _ = socket.send_to(&reply, from);
        }
    }
    Ok(())
}
