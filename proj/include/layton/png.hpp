#pragma once

// Self-contained PNG reader/writer for 8-bit gray/RGB/RGBA images.
// Writing emits stored (uncompressed) deflate blocks, which every decoder
// accepts; reading implements full inflate so externally produced files
// load too.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "layton/errors.hpp"

namespace layton::png {

inline uint32_t crc32(const uint8_t* data, size_t n, uint32_t crc = 0) {
    static uint32_t table[256];
    static bool init = false;
    if (!init) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            table[i] = c;
        }
        init = true;
    }
    crc ^= 0xffffffffu;
    for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

inline uint32_t adler32(const uint8_t* data, size_t n) {
    uint32_t a = 1, b = 0;
    for (size_t i = 0; i < n; ++i) {
        a = (a + data[i]) % 65521;
        b = (b + a) % 65521;
    }
    return (b << 16) | a;
}

namespace detail {

struct BitReader {
    const uint8_t* data;
    size_t size;
    size_t pos = 0;
    uint32_t bitbuf = 0;
    int bitcnt = 0;

    uint32_t bits(int n) {
        while (bitcnt < n) {
            if (pos >= size) throw IntegrityError("png: truncated deflate stream");
            bitbuf |= uint32_t(data[pos++]) << bitcnt;
            bitcnt += 8;
        }
        uint32_t v = bitbuf & ((1u << n) - 1);
        bitbuf >>= n;
        bitcnt -= n;
        return v;
    }

    void align() {
        bitbuf = 0;
        bitcnt = 0;
    }
};

struct Huffman {
    // canonical decode tables per RFC 1951
    int counts[16] = {};
    std::vector<int> symbols;

    void build(const uint8_t* lengths, int n) {
        for (int i = 0; i < 16; ++i) counts[i] = 0;
        for (int i = 0; i < n; ++i) counts[lengths[i]]++;
        counts[0] = 0;
        symbols.assign(size_t(n), 0);
        int offs[16];
        offs[1] = 0;
        for (int len = 1; len < 15; ++len) offs[len + 1] = offs[len] + counts[len];
        for (int i = 0; i < n; ++i)
            if (lengths[i]) symbols[size_t(offs[lengths[i]]++)] = i;
    }

    int decode(BitReader& br) const {
        int code = 0, first = 0, index = 0;
        for (int len = 1; len <= 15; ++len) {
            code |= int(br.bits(1));
            int count = counts[len];
            if (code - first < count) return symbols[size_t(index + (code - first))];
            index += count;
            first = (first + count) << 1;
            code <<= 1;
        }
        throw IntegrityError("png: bad huffman code");
    }
};

inline std::vector<uint8_t> inflate(const uint8_t* data, size_t size) {
    BitReader br{data, size};
    std::vector<uint8_t> out;
    static const int len_base[29] = {3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 15, 17, 19, 23, 27, 31, 35, 43,
                                     51, 59, 67, 83, 99, 115, 131, 163, 195, 227, 258};
    static const int len_extra[29] = {0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2,
                                      3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0};
    static const int dist_base[30] = {1, 2, 3, 4, 5, 7, 9, 13, 17, 25, 33, 49, 65, 97, 129, 193, 257, 385,
                                      513, 769, 1025, 1537, 2049, 3073, 4097, 6145, 8193, 12289, 16385, 24577};
    static const int dist_extra[30] = {0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6,
                                       7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13};
    bool final_block = false;
    while (!final_block) {
        final_block = br.bits(1) != 0;
        uint32_t btype = br.bits(2);
        if (btype == 0) {
            br.align();
            if (br.pos + 4 > br.size) throw IntegrityError("png: truncated stored block");
            uint32_t len = uint32_t(br.data[br.pos]) | (uint32_t(br.data[br.pos + 1]) << 8);
            uint32_t nlen = uint32_t(br.data[br.pos + 2]) | (uint32_t(br.data[br.pos + 3]) << 8);
            br.pos += 4;
            if ((len ^ 0xffffu) != nlen) throw IntegrityError("png: stored block length check failed");
            if (br.pos + len > br.size) throw IntegrityError("png: truncated stored block data");
            out.insert(out.end(), br.data + br.pos, br.data + br.pos + len);
            br.pos += len;
        } else if (btype == 1 || btype == 2) {
            Huffman lit, dist;
            if (btype == 1) {
                uint8_t ll[288];
                for (int i = 0; i < 144; ++i) ll[i] = 8;
                for (int i = 144; i < 256; ++i) ll[i] = 9;
                for (int i = 256; i < 280; ++i) ll[i] = 7;
                for (int i = 280; i < 288; ++i) ll[i] = 8;
                uint8_t dl[30];
                for (int i = 0; i < 30; ++i) dl[i] = 5;
                lit.build(ll, 288);
                dist.build(dl, 30);
            } else {
                int hlit = int(br.bits(5)) + 257;
                int hdist = int(br.bits(5)) + 1;
                int hclen = int(br.bits(4)) + 4;
                static const int order[19] = {16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15};
                uint8_t clen[19] = {};
                for (int i = 0; i < hclen; ++i) clen[order[i]] = uint8_t(br.bits(3));
                Huffman cl;
                cl.build(clen, 19);
                std::vector<uint8_t> lengths(size_t(hlit + hdist), 0);
                int i = 0;
                while (i < hlit + hdist) {
                    int sym = cl.decode(br);
                    if (sym < 16) {
                        lengths[size_t(i++)] = uint8_t(sym);
                    } else if (sym == 16) {
                        if (i == 0) throw IntegrityError("png: bad code length repeat");
                        int rep = 3 + int(br.bits(2));
                        uint8_t prev = lengths[size_t(i - 1)];
                        while (rep-- && i < hlit + hdist) lengths[size_t(i++)] = prev;
                    } else if (sym == 17) {
                        int rep = 3 + int(br.bits(3));
                        while (rep-- && i < hlit + hdist) lengths[size_t(i++)] = 0;
                    } else {
                        int rep = 11 + int(br.bits(7));
                        while (rep-- && i < hlit + hdist) lengths[size_t(i++)] = 0;
                    }
                }
                lit.build(lengths.data(), hlit);
                dist.build(lengths.data() + hlit, hdist);
            }
            while (true) {
                int sym = lit.decode(br);
                if (sym < 256) {
                    out.push_back(uint8_t(sym));
                } else if (sym == 256) {
                    break;
                } else {
                    sym -= 257;
                    if (sym >= 29) throw IntegrityError("png: bad length symbol");
                    int length = len_base[sym] + int(br.bits(len_extra[sym]));
                    int dsym = dist.decode(br);
                    if (dsym >= 30) throw IntegrityError("png: bad distance symbol");
                    int distance = dist_base[dsym] + int(br.bits(dist_extra[dsym]));
                    if (size_t(distance) > out.size()) throw IntegrityError("png: distance too far back");
                    size_t start = out.size() - size_t(distance);
                    for (int k = 0; k < length; ++k) out.push_back(out[start + size_t(k)]);
                }
            }
        } else {
            throw IntegrityError("png: bad deflate block type");
        }
    }
    return out;
}

inline int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

inline void put_u32(std::vector<uint8_t>& v, uint32_t x) {
    v.push_back(uint8_t(x >> 24));
    v.push_back(uint8_t(x >> 16));
    v.push_back(uint8_t(x >> 8));
    v.push_back(uint8_t(x));
}

inline uint32_t get_u32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

}  // namespace detail

// rgb: H*W*3 bytes, row-major.
inline void write_rgb8(const std::string& path, const uint8_t* rgb, int width, int height) {
    LAYTON_CHECK(width > 0 && height > 0, "png write: bad dimensions");
    std::vector<uint8_t> raw;
    raw.reserve(size_t(height) * (size_t(width) * 3 + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);  // filter: none
        raw.insert(raw.end(), rgb + size_t(y) * width * 3, rgb + size_t(y + 1) * width * 3);
    }

    std::vector<uint8_t> idat;
    idat.push_back(0x78);
    idat.push_back(0x01);
    size_t off = 0;
    while (off < raw.size() || raw.empty()) {
        size_t chunk = std::min<size_t>(65535, raw.size() - off);
        bool last = off + chunk == raw.size();
        idat.push_back(last ? 1 : 0);
        idat.push_back(uint8_t(chunk & 0xff));
        idat.push_back(uint8_t(chunk >> 8));
        idat.push_back(uint8_t(~chunk & 0xff));
        idat.push_back(uint8_t((~chunk >> 8) & 0xff));
        idat.insert(idat.end(), raw.begin() + long(off), raw.begin() + long(off + chunk));
        off += chunk;
        if (last) break;
    }
    uint32_t ad = adler32(raw.data(), raw.size());
    detail::put_u32(idat, ad);

    std::vector<uint8_t> out;
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    out.insert(out.end(), sig, sig + 8);

    auto chunk = [&](const char* type, const std::vector<uint8_t>& payload) {
        detail::put_u32(out, uint32_t(payload.size()));
        size_t crc_start = out.size();
        out.insert(out.end(), type, type + 4);
        out.insert(out.end(), payload.begin(), payload.end());
        detail::put_u32(out, crc32(out.data() + crc_start, out.size() - crc_start));
    };

    std::vector<uint8_t> ihdr;
    detail::put_u32(ihdr, uint32_t(width));
    detail::put_u32(ihdr, uint32_t(height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type: truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    chunk("IHDR", ihdr);
    chunk("IDAT", idat);
    chunk("IEND", {});

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("png write: cannot open " + path);
    f.write(reinterpret_cast<const char*>(out.data()), long(out.size()));
    if (!f) throw IntegrityError("png write: short write to " + path);
}

// Returns H*W*3 bytes; supports 8-bit gray (0), RGB (2), RGBA (6).
inline std::vector<uint8_t> read_rgb8(const std::string& path, int& width, int& height) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IntegrityError("png read: cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw IntegrityError("png read: bad signature in " + path);

    size_t pos = 8;
    int color_type = -1, bit_depth = 0;
    width = height = 0;
    std::vector<uint8_t> idat;
    while (pos + 8 <= bytes.size()) {
        uint32_t len = detail::get_u32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw IntegrityError("png read: truncated chunk");
        std::string type(reinterpret_cast<const char*>(bytes.data() + pos + 4), 4);
        uint32_t stored_crc = detail::get_u32(bytes.data() + pos + 8 + len);
        uint32_t actual_crc = crc32(bytes.data() + pos + 4, size_t(len) + 4);
        if (stored_crc != actual_crc) throw IntegrityError("png read: chunk crc mismatch in " + path);
        const uint8_t* payload = bytes.data() + pos + 8;
        if (type == "IHDR") {
            width = int(detail::get_u32(payload));
            height = int(detail::get_u32(payload + 4));
            bit_depth = payload[8];
            color_type = payload[9];
            if (payload[12] != 0) throw IntegrityError("png read: interlaced images unsupported");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), payload, payload + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    LAYTON_CHECK(width > 0 && height > 0, "png read: missing IHDR");
    if (bit_depth != 8 || (color_type != 0 && color_type != 2 && color_type != 6))
        throw IntegrityError("png read: unsupported format (need 8-bit gray/RGB/RGBA)");
    if (idat.size() < 2) throw IntegrityError("png read: missing IDAT");

    std::vector<uint8_t> raw = detail::inflate(idat.data() + 2, idat.size() - 2);
    int ch = color_type == 0 ? 1 : (color_type == 2 ? 3 : 4);
    size_t stride = size_t(width) * size_t(ch);
    if (raw.size() < size_t(height) * (stride + 1)) throw IntegrityError("png read: short pixel data");

    // unfilter in place into `pix`
    std::vector<uint8_t> pix(size_t(height) * stride);
    for (int y = 0; y < height; ++y) {
        uint8_t filter = raw[size_t(y) * (stride + 1)];
        const uint8_t* src = raw.data() + size_t(y) * (stride + 1) + 1;
        uint8_t* dst = pix.data() + size_t(y) * stride;
        const uint8_t* prev = y > 0 ? pix.data() + size_t(y - 1) * stride : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            int a = i >= size_t(ch) ? dst[i - size_t(ch)] : 0;
            int b = prev ? prev[i] : 0;
            int c = (prev && i >= size_t(ch)) ? prev[i - size_t(ch)] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += detail::paeth(a, b, c); break;
                default: throw IntegrityError("png read: bad filter type");
            }
            dst[i] = uint8_t(v & 0xff);
        }
    }

    std::vector<uint8_t> rgb(size_t(width) * size_t(height) * 3);
    for (size_t i = 0; i < size_t(width) * size_t(height); ++i) {
        if (ch == 1) {
            rgb[i * 3] = rgb[i * 3 + 1] = rgb[i * 3 + 2] = pix[i];
        } else {
            rgb[i * 3] = pix[i * size_t(ch)];
            rgb[i * 3 + 1] = pix[i * size_t(ch) + 1];
            rgb[i * 3 + 2] = pix[i * size_t(ch) + 2];
        }
    }
    return rgb;
}

}  // namespace layton::png
