//! Open-addressing table from integer lattice keys to dense vertex ids.

pub(super) const NONE: u32 = u32::MAX;

pub(super) struct KeyTable {
    key_len: usize,
    keys: Vec<i32>,
    slots: Vec<u32>,
    mask: usize,
}

impl KeyTable {
    pub(super) fn with_capacity(key_len: usize, capacity: usize) -> Self {
        let size = (capacity.max(8) * 2).next_power_of_two();
        KeyTable {
            key_len,
            keys: Vec::with_capacity(capacity * key_len),
            slots: vec![NONE; size],
            mask: size - 1,
        }
    }

    pub(super) fn len(&self) -> usize {
        self.keys.len() / self.key_len
    }

    pub(super) fn key(&self, id: usize) -> &[i32] {
        &self.keys[id * self.key_len..(id + 1) * self.key_len]
    }

    fn hash(key: &[i32]) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &k in key {
            h = (h ^ (k as u32 as u64)).wrapping_mul(0x0000_0100_0000_01b3);
            h ^= h >> 29;
        }
        h as usize
    }

    pub(super) fn find(&self, key: &[i32]) -> u32 {
        let mut slot = Self::hash(key) & self.mask;
        loop {
            let id = self.slots[slot];
            if id == NONE {
                return NONE;
            }
            if self.key(id as usize) == key {
                return id;
            }
            slot = (slot + 1) & self.mask;
        }
    }

    pub(super) fn insert(&mut self, key: &[i32]) -> u32 {
        if (self.len() + 1) * 2 > self.slots.len() {
            self.grow();
        }
        let mut slot = Self::hash(key) & self.mask;
        loop {
            let id = self.slots[slot];
            if id == NONE {
                let new_id = self.len() as u32;
                self.keys.extend_from_slice(key);
                self.slots[slot] = new_id;
                return new_id;
            }
            if self.key(id as usize) == key {
                return id;
            }
            slot = (slot + 1) & self.mask;
        }
    }

    fn grow(&mut self) {
        let size = self.slots.len() * 2;
        self.slots = vec![NONE; size];
        self.mask = size - 1;
        for id in 0..self.len() {
            let mut slot = Self::hash(self.key(id)) & self.mask;
            while self.slots[slot] != NONE {
                slot = (slot + 1) & self.mask;
            }
            self.slots[slot] = id as u32;
        }
    }
}
