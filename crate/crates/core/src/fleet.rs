//! Many independent devices driven in lockstep batches.

use crate::device::{Device, DeviceConfig};
use crate::parallel::Execution;

#[derive(Debug)]
pub struct Fleet {
    devices: Vec<Device>,
    exec: Execution,
}

impl Fleet {
    pub fn new(configs: impl IntoIterator<Item = DeviceConfig>, exec: Execution) -> Self {
        Self {
            devices: configs.into_iter().map(Device::new).collect(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device_mut(&mut self, i: usize) -> &mut Device {
        &mut self.devices[i]
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.exec = exec;
    }

    /// Deliver `batch[i]` to device `i`, each device handling its own queue
    /// in order. Devices share nothing, so they run side by side.
    pub fn deliver(&mut self, batch: Vec<Vec<Vec<u8>>>) -> Vec<Vec<Option<Vec<u8>>>> {
        assert_eq!(batch.len(), self.devices.len(), "one queue per device");
        let mut work: Vec<(&mut Device, Vec<Vec<u8>>, Vec<Option<Vec<u8>>>)> = self
            .devices
            .iter_mut()
            .zip(batch)
            .map(|(d, q)| (d, q, Vec::new()))
            .collect();
        self.exec.for_each_mut(&mut work, |(d, q, out)| {
            out.extend(q.iter().map(|dg| d.handle_datagram(dg)));
        });
        work.into_iter().map(|(_, _, out)| out).collect()
    }

    /// Apply `f` to every device.
    pub fn for_each(&mut self, f: impl Fn(&mut Device) + Sync + Send) {
        self.exec.for_each_mut(&mut self.devices, f);
    }
}
