use crate::codec::{
    decode_unchecked, encode_object, unpack_atomic, verify_object, ObjectRecord, OBJECT_OVERHEAD,
};
use crate::fabric::FabricError;
use crate::index::{HashEntry, TableGeometry};
use crate::sim::{ClientCtx, OpKind, Outcome, Placement};
use crate::wire::{self, Reader, Writer};

use super::{decode_head_view, head_of, ErdaError};

#[derive(Clone, Debug)]
pub struct ClientOptions {
    /// Extra reads of a new version that failed verification before falling
    /// back to the old one.
    pub retries: u32,
    pub backoff_ns: u64,
    /// Clearing this trusts record lengths without checking the CRC. Only for
    /// tests that show what verification protects against.
    #[doc(hidden)]
    pub verify_checksums: bool,
}

impl Default for ClientOptions {
    fn default() -> Self {
        ClientOptions {
            retries: 3,
            backoff_ns: 2000,
            verify_checksums: true,
        }
    }
}

/// A client's view of one head: its active chain and whether it is cleaning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadView {
    pub generation: u32,
    pub cleaning: bool,
    /// (address, rkey) of each region of the active chain.
    pub regions: Vec<(u64, u32)>,
}

/// What a client learns when it connects.
#[derive(Clone, Debug)]
pub struct Session {
    pub client_id: u32,
    pub table: TableGeometry,
    pub table_rkey: u32,
    pub mailbox: (u64, u32),
    pub max_object_size: u32,
    pub region_size: u64,
    pub segment_size: u64,
    pub heads: Vec<HeadView>,
}

impl Session {
    fn decode(buf: &[u8]) -> Result<Session, ErdaError> {
        let mut r = Reader::new(buf);
        let status = r.u8()?;
        if status != wire::ST_OK {
            return Err(ErdaError::Status(status));
        }
        let client_id = r.u32()?;
        let table = TableGeometry::new(r.u64()?, r.u64()?);
        let table_rkey = r.u32()?;
        let mailbox = (r.u64()?, r.u32()?);
        let max_object_size = r.u32()?;
        let region_size = r.u64()?;
        let segment_size = r.u64()?;
        let n = r.u8()?;
        let heads = (0..n)
            .map(|_| decode_head_view(&mut r))
            .collect::<Result<_, _>>()?;
        Ok(Session {
            client_id,
            table,
            table_rkey,
            mailbox,
            max_object_size,
            region_size,
            segment_size,
            heads,
        })
    }

    /// Address and rkey of a chain offset under the current view.
    pub fn locate(&self, head: u8, offset: u32) -> Option<(u64, u32)> {
        let view = self.heads.get(head as usize)?;
        let (base, rkey) = *view
            .regions
            .get((offset as u64 / self.region_size) as usize)?;
        Some((base + offset as u64 % self.region_size, rkey))
    }
}

pub struct ErdaClient {
    ctx: ClientCtx,
    opts: ClientOptions,
    session: Session,
}

enum Attempt {
    Done(Outcome),
    Cleaning,
}

impl ErdaClient {
    pub async fn connect(ctx: ClientCtx, opts: ClientOptions) -> Result<ErdaClient, ErdaError> {
        let reply = ctx.call(vec![wire::OP_CONNECT]).await?;
        let session = Session::decode(&reply)?;
        Ok(ErdaClient { ctx, opts, session })
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn ctx(&self) -> &ClientCtx {
        &self.ctx
    }

    /// Apply server pushes received so far.
    fn process_notes(&mut self) {
        for note in self.ctx.take_notes() {
            let mut r = Reader::new(&note);
            let (Ok(kind), Ok(head)) = (r.u8(), r.u8()) else {
                continue;
            };
            let Some(view) = self.session.heads.get_mut(head as usize) else {
                continue;
            };
            match kind {
                wire::NOTE_CLEAN_START => view.cleaning = true,
                wire::NOTE_CLEAN_FINISH | wire::NOTE_HEAD_UPDATE => {
                    if let Ok(v) = decode_head_view(&mut r) {
                        if v.generation >= view.generation {
                            *view = v;
                        }
                    }
                }
                _ => {}
            }
        }
    }

    fn cleaning(&mut self, head: u8) -> bool {
        self.process_notes();
        self.session.heads[head as usize].cleaning
    }

    pub async fn get(&mut self, key: &[u8]) -> Outcome {
        let idx = self.ctx.begin_op(OpKind::Get, key, None);
        let out = match self.get_one_sided(key, idx).await {
            Ok(Attempt::Done(o)) => o,
            Ok(Attempt::Cleaning) => self
                .get_two_sided(key)
                .await
                .unwrap_or_else(|e| Outcome::Failed(e.to_string())),
            Err(e) => Outcome::Failed(e.to_string()),
        };
        self.ctx.end_op(idx, out.clone());
        out
    }

    async fn read_entry(
        &mut self,
        key: &[u8],
        idx: usize,
    ) -> Result<Option<HashEntry>, FabricError> {
        let (addr, len) = self.session.table.neighborhood(key);
        let bytes = self.ctx.read(addr, len, self.session.table_rkey).await?;
        self.ctx.count_read(idx);
        Ok(self
            .session
            .table
            .find_in_neighborhood(key, &bytes)
            .map(|(_, e)| e))
    }

    /// Read and check the record at `offset`. `None` covers torn, foreign and
    /// unreachable records alike.
    async fn read_record(
        &mut self,
        head: u8,
        offset: u32,
        key: &[u8],
        idx: usize,
    ) -> Option<ObjectRecord> {
        let (addr, rkey) = self.session.locate(head, offset)?;
        let seg = self.session.segment_size;
        let len = (seg - offset as u64 % seg).min(self.session.max_object_size as u64) as usize;
        // A stale view may name a region that has since been released.
        let data = self.ctx.read(addr, len, rkey).await.ok()?;
        self.ctx.count_read(idx);
        let rec = if self.opts.verify_checksums {
            verify_object(&data)
        } else {
            decode_unchecked(&data)
        };
        rec.filter(|r| r.key == key)
    }

    async fn get_one_sided(&mut self, key: &[u8], idx: usize) -> Result<Attempt, FabricError> {
        let head = head_of(key, self.session.heads.len() as u8);
        let mut attempt = 0;
        loop {
            if self.cleaning(head) {
                return Ok(Attempt::Cleaning);
            }
            let Some(entry) = self.read_entry(key, idx).await? else {
                return Ok(Attempt::Done(Outcome::NotFound));
            };
            let a = unpack_atomic(entry.word);
            if let Some(rec) = self.read_record(head, a.new_offset(), key, idx).await {
                return Ok(Attempt::Done(
                    rec.value.map_or(Outcome::NotFound, Outcome::Value),
                ));
            }
            if attempt < self.opts.retries {
                attempt += 1;
                self.ctx.sleep(self.opts.backoff_ns).await;
                continue;
            }
            if a.old_offset() == a.new_offset() {
                // A create whose object has not landed (or never will).
                return Ok(Attempt::Done(Outcome::NotFound));
            }
            if self.cleaning(head) {
                return Ok(Attempt::Cleaning);
            }
            let Some(rec) = self.read_record(head, a.old_offset(), key, idx).await else {
                return Ok(Attempt::Done(Outcome::DataLoss));
            };
            let repair = Writer::new()
                .u8(wire::OP_REPAIR)
                .key(key)
                .u64(entry.word)
                .finish();
            self.ctx.send(repair);
            return Ok(Attempt::Done(
                rec.value.map_or(Outcome::NotFound, Outcome::Recovered),
            ));
        }
    }

    async fn get_two_sided(&mut self, key: &[u8]) -> Result<Outcome, ErdaError> {
        let reply = self
            .ctx
            .call(Writer::new().u8(wire::OP_READ).key(key).finish())
            .await?;
        let mut r = Reader::new(&reply);
        Ok(match r.u8()? {
            wire::ST_OK => {
                let n = r.u32()? as usize;
                Outcome::Value(r.take(n)?.to_vec())
            }
            wire::ST_NOT_FOUND => Outcome::NotFound,
            wire::ST_DATA_LOSS => Outcome::DataLoss,
            st => return Err(ErdaError::Status(st)),
        })
    }

    pub async fn put(&mut self, key: &[u8], value: &[u8]) -> Outcome {
        self.write(OpKind::Put, key, Some(value)).await
    }

    pub async fn delete(&mut self, key: &[u8]) -> Outcome {
        self.write(OpKind::Delete, key, None).await
    }

    async fn write(&mut self, kind: OpKind, key: &[u8], value: Option<&[u8]>) -> Outcome {
        let idx = self.ctx.begin_op(kind, key, value);
        let out = match encode_object(key, value) {
            Ok(obj) if obj.len() <= self.session.max_object_size as usize => {
                match self.write_one_sided(key, &obj, idx).await {
                    Ok(Attempt::Done(o)) => o,
                    Ok(Attempt::Cleaning) => self.write_two_sided(key, &obj, idx).await,
                    Err(e) => Outcome::Failed(e.to_string()),
                }
            }
            Ok(obj) => {
                Outcome::Failed(format!("object of {} bytes exceeds the maximum", obj.len()))
            }
            Err(e) => Outcome::Failed(e.to_string()),
        };
        self.ctx.end_op(idx, out.clone());
        out
    }

    fn op_byte(obj: &[u8]) -> u8 {
        if obj[0] & 1 == 1 {
            wire::OP_DELETE
        } else {
            wire::OP_PUT
        }
    }

    fn status_outcome(status: u8) -> Outcome {
        match status {
            wire::ST_NOT_FOUND => Outcome::NotFound,
            wire::ST_FULL => Outcome::Failed("log full".into()),
            st => Outcome::Failed(format!("server returned status {st}")),
        }
    }

    /// Reserve space with a write-with-immediate, then push the object with a
    /// one-sided write.
    async fn write_one_sided(
        &mut self,
        key: &[u8],
        obj: &[u8],
        idx: usize,
    ) -> Result<Attempt, ErdaError> {
        let head = head_of(key, self.session.heads.len() as u8);
        if self.cleaning(head) {
            return Ok(Attempt::Cleaning);
        }
        let req = Writer::new()
            .u8(Self::op_byte(obj))
            .key(key)
            .u32(obj.len() as u32)
            .finish();
        let (mb_addr, mb_rkey) = self.session.mailbox;
        self.ctx
            .write(mb_addr, req, mb_rkey, Some(self.session.client_id), 0)
            .await?;
        let reply = self.ctx.reply(u64::MAX).await?;
        let mut r = Reader::new(&reply);
        let status = r.u8()?;
        let resp_head = r.u8()?;
        let offset = r.u32()?;
        match status {
            wire::ST_OK => {}
            wire::ST_CLEANING => {
                self.session.heads[head as usize].cleaning = true;
                return Ok(Attempt::Cleaning);
            }
            st => return Ok(Attempt::Done(Self::status_outcome(st))),
        }
        // Any chain growth was announced before the reply.
        self.process_notes();
        let Some((addr, rkey)) = self.session.locate(resp_head, offset) else {
            return Ok(Attempt::Done(Outcome::Failed(format!(
                "offset {offset} outside the known chain"
            ))));
        };
        let paper = OBJECT_OVERHEAD + (obj.len() - crate::codec::OBJECT_HEADER_LEN) as u64;
        self.ctx
            .write(addr, obj.to_vec(), rkey, None, paper)
            .await?;
        let generation = self.session.heads[resp_head as usize].generation;
        self.ctx.place_op(
            idx,
            Placement {
                head: resp_head,
                chain_offset: offset,
                addr,
                generation,
                one_sided: true,
            },
        );
        Ok(Attempt::Done(Outcome::Done))
    }

    /// Hand the whole object to the server, used while the head is cleaning.
    async fn write_two_sided(&mut self, key: &[u8], obj: &[u8], idx: usize) -> Outcome {
        let msg = Writer::new()
            .u8(wire::OP_WRITE_OBJ)
            .u8(Self::op_byte(obj))
            .key(key)
            .bytes(obj)
            .finish();
        let reply = match self.ctx.call(msg).await {
            Ok(r) => r,
            Err(e) => return Outcome::Failed(e.to_string()),
        };
        let mut r = Reader::new(&reply);
        let parsed = (|| Ok::<_, wire::WireError>((r.u8()?, r.u8()?, r.u32()?)))();
        match parsed {
            Ok((wire::ST_OK, head, offset)) => {
                let generation = self.session.heads[head as usize].generation;
                let placement = Placement {
                    head,
                    chain_offset: offset,
                    addr: 0,
                    generation,
                    one_sided: false,
                };
                self.ctx.place_op(idx, placement);
                Outcome::Done
            }
            Ok((st, _, _)) => Self::status_outcome(st),
            Err(e) => Outcome::Failed(e.to_string()),
        }
    }
}
